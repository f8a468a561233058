"""Design-based estimation for blocked cluster-randomized experiments with unit weights."""

__version__ = "0.1.0"

from .ate import BlockedClusterATE  # noqa: E402
from .population import Population, ingest_units  # noqa: E402

__all__ = ["BlockedClusterATE", "Population", "ingest_units", "__version__"]
