"""Estimator-style wrappers around calibration and Voronoi density."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_scalar, check_triple
from .adjoint import CalibrationConfig, calibrate, cost_functional
from .density import bounded_voronoi, density_field
from .model import AdmissibleBox, ControlVector, ModelParams
from .simulator import Rect, Trajectory, integrate, seed_streams


class CrowdModelCalibrator(BaseEstimator):
    """Fit ``(lam, A, R)`` of the interaction model to tracked trajectories.

    ``fit`` takes a :class:`Trajectory` of observed positions on a uniform
    grid. Desired velocities ``W`` default to the first observed velocities.
    After fitting, ``lam_``, ``A_``, ``R_`` hold the estimate and
    ``history_`` the per-iteration ``(lam, A, R, J)`` rows.
    """

    def __init__(self, lam0=0.0, A0=0.0, R0=40.0, tau=1.0, a=2.0, r=0.5, d=0.4,
                 sigma1=1.0, sigma2=0.0, beta=(20.0, 4000.0, 4000.0), epsilon_rel=1e-2,
                 m=50, batch_length=None, max_iters=100, eps=1e-3, A_max=100.0, R_max=100.0,
                 adjoint="discrete", random_state=0):
        self.lam0 = lam0
        self.A0 = A0
        self.R0 = R0
        self.tau = tau
        self.a = a
        self.r = r
        self.d = d
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.beta = beta
        self.epsilon_rel = epsilon_rel
        self.m = m
        self.batch_length = batch_length
        self.max_iters = max_iters
        self.eps = eps
        self.A_max = A_max
        self.R_max = R_max
        self.adjoint = adjoint
        self.random_state = random_state

    def _config(self) -> CalibrationConfig:
        return CalibrationConfig(
            sigma1=check_scalar(self.sigma1, "sigma1", low=0.0),
            sigma2=check_scalar(self.sigma2, "sigma2", low=0.0),
            beta=tuple(check_triple(self.beta, "beta", positive=True)),
            epsilon_rel=self.epsilon_rel,
            m=int(self.m),
            batch_length=self.batch_length,
            max_iters=int(self.max_iters),
            box=AdmissibleBox(self.eps, self.A_max, self.R_max),
            seed=int(self.random_state),
            adjoint=self.adjoint,
        )

    def _params(self) -> ModelParams:
        return ModelParams(lam=float(self.lam0), tau=float(self.tau), A=float(self.A0), R=float(self.R0),
                           a=float(self.a), r=float(self.r), d=float(self.d))

    @staticmethod
    def _check_data(X) -> Trajectory:
        if not isinstance(X, Trajectory):
            raise TypeError(f"expected a Trajectory, got {type(X).__name__}")
        if X.n_steps < 1:
            raise ValueError("data must contain at least two frames")
        return X

    def fit(self, X, y=None, W=None, callback=None):
        data = self._check_data(X)
        cfg = self._config()
        params = self._params()
        W = data.velocities[0] if W is None else check_points(W, "W")
        if len(W) != data.n_agents:
            raise ValueError(f"W has {len(W)} rows for {data.n_agents} agents")
        u0 = ControlVector(float(self.lam0), float(self.A0), float(self.R0))
        rng = seed_streams(int(self.random_state))[1]
        result = calibrate(data, u0, params, cfg, W=W, rng=rng, callback=callback)
        self.W_ = np.array(W, dtype=float)
        self.u_ = result.u
        self.lam_, self.A_, self.R_ = result.u
        self.history_ = np.column_stack((result.controls, result.costs))
        self.n_iter_ = len(result.history) - 1
        self.converged_ = result.converged
        self.trajectory_ = result.trajectory
        return self

    def get_control(self) -> ControlVector:
        check_is_fitted(self, "u_")
        return self.u_

    def predict(self, X, W=None) -> Trajectory:
        """Simulate from the first frame of ``X`` over its time grid with the fitted control."""
        check_is_fitted(self, "u_")
        data = self._check_data(X)
        W = self.W_ if W is None else check_points(W, "W")
        params = self._params().with_control(self.u_)
        return integrate(data.positions[0], W, W, params, data.duration, data.dt, t0=float(data.times[0]))

    def score(self, X, y=None, W=None) -> float:
        """Negative tracking cost of the fitted control on ``X``."""
        pred = self.predict(X, W)
        return -cost_functional(pred, X, self.u_, self._config())


class VoronoiDensity(TransformerMixin, BaseEstimator):
    """Voronoi density ``1/|cell|`` restricted to a rectangular region.

    ``fit`` builds the cells of the generator points; ``transform`` maps
    query points to the density of the cell they fall in (0 outside the
    region).
    """

    def __init__(self, region=(0.0, 1.0, 0.0, 1.0)):
        self.region = region

    def fit(self, X, y=None):
        P = check_points(X, "X", min_points=1)
        region = Rect.coerce(self.region)
        self.cells_ = bounded_voronoi(P, region)
        self.areas_ = np.array([c.area for c in self.cells_])
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "cells_")
        Q = check_points(X, "X")
        return density_field(self.cells_, Q)
