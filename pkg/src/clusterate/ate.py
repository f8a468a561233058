"""Scikit-learn style estimator wrapping the weighted regression path."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_array, check_consistent_length
from .exceptions import InputError
from .population import Population, block_summary, observed_assignment, without_covariates
from .variance import confidence_interval, crse_variance, design_variance_block, design_variance_pooled
from .wls import ModelSpec, build_design, design_columns, fit_wls


class BlockedClusterATE(BaseEstimator):
    """Average treatment effect for a blocked cluster-randomized experiment.

    Parameters
    ----------
    model : {"interacted", "none", "pooled", "block-cov"}
        Regression specification. ``"none"`` ignores covariates.
    variance : {"design", "crse"}
        Standard error used for ``se_``, ``df_`` and :meth:`conf_int`.
    g : float, optional
        Small-sample factor for the sandwich estimator, default ``G/(G-1)``.
    qstar : {"weight", "cluster"} or float
        Covariate degrees-of-freedom share for the design-based variance.
    level : float
        Default confidence level.
    df_rule : {"satterthwaite", "min"}
        How the two arms' degrees of freedom are combined.

    Attributes
    ----------
    effects_ : ndarray of shape (h,)
        Per-block effects (empty for the pooled model).
    effects_se_, effects_df_ : ndarray of shape (h,)
    effect_ : float
        Overall effect: the pooled-model effect when there are several
        blocks or ``model="pooled"``, otherwise the single block's effect.
    se_, df_ : float
        Standard error and degrees of freedom of ``effect_``.
    coef_ : ndarray
        All regression coefficients of ``model``, labelled by ``coef_labels_``.
    gamma_ : ndarray
        Covariate coefficients of ``model``.
    block_ids_ : tuple
    """

    def __init__(self, model="interacted", variance="design", g=None, qstar="weight", level=0.95, df_rule="satterthwaite"):
        self.model = model
        self.variance = variance
        self.g = g
        self.qstar = qstar
        self.level = level
        self.df_rule = df_rule

    def _report(self, pop, asg, fit, label, block=None):
        if self.variance == "crse":
            return crse_variance(fit, self.g)[label]
        if block is None:
            return design_variance_pooled(pop, asg, fit, self.df_rule)
        return design_variance_block(pop, asg, fit, block, self.qstar, self.df_rule)

    def fit(self, X, y, *, treatment, clusters, blocks=None, sample_weight=None):
        """Fit from unit-level arrays.

        Parameters
        ----------
        X : array-like of shape (n, v) or None
            Unit covariates.
        y : array-like of shape (n,)
        treatment : array-like of shape (n,)
            0/1 indicator, constant within clusters.
        clusters : array-like of shape (n,)
            Cluster labels, unique within a block.
        blocks : array-like of shape (n,), optional
            Block labels; default is a single block.
        sample_weight : array-like of shape (n,), optional
            Positive unit weights; default 1.
        """
        if self.variance not in ("design", "crse"):
            raise InputError(f"variance must be 'design' or 'crse', got {self.variance!r}")
        model = ModelSpec.parse(self.model)
        y = check_array(y, ensure_2d=False, dtype=float)
        n = y.shape[0]
        X = np.empty((n, 0)) if X is None else check_array(X, dtype=float)
        weights = np.ones(n) if sample_weight is None else check_array(sample_weight, ensure_2d=False, dtype=float)
        check_consistent_length(X, y, treatment, clusters, weights)
        pop = Population.from_arrays(blocks, clusters, weights, X, y=y, treatment=treatment)
        if model is ModelSpec.NO_COVARIATES:
            pop = without_covariates(pop)
        asg = observed_assignment(pop)

        fit = fit_wls(build_design(pop, asg, model))
        bs = block_summary(pop, asg)
        self.block_ids_ = pop.block_ids
        self.n_features_in_ = X.shape[1]
        self.coef_ = fit.coefficients
        self.coef_labels_ = fit.labels
        self.gamma_ = fit.gamma
        self.pstar_ = bs.pstar
        self.xbarbar_ = bs.xbarbar
        self.covariate_names_ = pop.covariate_names
        self.model_ = model

        if model is ModelSpec.POOLED:
            self.effects_ = np.empty(0)
            reports = []
        else:
            self.effects_ = fit.tau.copy()
            reports = [self._report(pop, asg, fit, fit.labels[b], b) for b in range(pop.h)]
        self.effects_se_ = np.array([r.se for r in reports])
        self.effects_df_ = np.array([r.df for r in reports])

        if model is ModelSpec.POOLED or pop.h > 1:
            pfit = fit if model is ModelSpec.POOLED else fit_wls(build_design(pop, asg, ModelSpec.POOLED))
            self.effect_ = pfit["tau"]
            self.report_ = self._report(pop, asg, pfit, "tau")
        else:
            self.effect_ = float(self.effects_[0])
            self.report_ = reports[0]
        self.se_ = self.report_.se
        self.df_ = self.report_.df
        return self

    def conf_int(self, level=None):
        """Confidence interval ``(low, high)`` for ``effect_``."""
        check_is_fitted(self, "report_")
        return confidence_interval(self.effect_, self.report_, self.level if level is None else level)

    def predict(self, X, *, treatment, blocks=None):
        """Fitted outcomes for new units using the fitted centering constants."""
        check_is_fitted(self, "coef_")
        treatment = check_array(treatment, ensure_2d=False, dtype=float)
        n = treatment.shape[0]
        X = np.empty((n, 0)) if X is None else check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        if self.model_ is ModelSpec.NO_COVARIATES:
            X = np.empty((n, 0))
        if blocks is None:
            if len(self.block_ids_) != 1:
                raise InputError("blocks are required when the fit has several blocks")
            index = np.zeros(n, dtype=int)
        else:
            lookup = {str(b): i for i, b in enumerate(self.block_ids_)}
            try:
                index = np.array([lookup[str(b)] for b in blocks], dtype=int)
            except KeyError as exc:
                raise InputError(f"unknown block {exc.args[0]!r}") from None
        check_consistent_length(X, treatment, index)
        Z, _, _ = design_columns(
            self.model_, index, treatment, X, self.pstar_, self.xbarbar_, self.block_ids_, self.covariate_names_
        )
        return Z @ self.coef_
