"""Estimator-style wrappers over the functional pipeline stages.

Each stage has a fit/predict lifecycle: the LoG detector fits by grid
search, the surrogate fits by training against LoG-candidate targets,
and the crop classifier fits on paired lesion/decoy crops.  Constructor
arguments are stored verbatim so ``get_params``/``set_params``/``clone``
behave the sklearn way; fitted state lives in trailing-underscore
attributes and ``fit`` returns ``self``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cropcls import (
    CropAugmentation,
    CropSpec,
    build_classifier_net,
    classify_candidates,
    train_classifier,
)
from .errors import ConfigError
from .scalespace import (
    CandidateSet,
    LoGParams,
    OptimizeGrid,
    detect_candidates,
    optimize_log_params,
)
from .surrogate import (
    SurrogateModel,
    SurrogateSpec,
    build_surrogate_net,
    build_training_targets,
    predict_response,
    select_threshold,
    train_surrogate,
)
from .volume import GroundTruth, Volume3D


def _check_volumes_truths(X, y) -> None:
    if not X or y is None or len(X) != len(y):
        raise ConfigError("fit needs equal, non-empty lists of volumes and truths")
    if not all(isinstance(v, Volume3D) for v in X):
        raise ConfigError("X must be a sequence of Volume3D")
    if not all(isinstance(t, GroundTruth) for t in y):
        raise ConfigError("y must be a sequence of GroundTruth")


class LogCandidateDetector(BaseEstimator):
    """Blob candidates from a LoG filter bank, parameters fitted by grid search."""

    def __init__(self, sigma_values_mm=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0),
                 sigma_step_mm=1.0,
                 thresholds=(0.02, 0.05, 0.1, 0.15, 0.2, 0.3),
                 min_sensitivity=0.95, hit_radius_mm=1.5, max_candidates=100000):
        self.sigma_values_mm = sigma_values_mm
        self.sigma_step_mm = sigma_step_mm
        self.thresholds = thresholds
        self.min_sensitivity = min_sensitivity
        self.hit_radius_mm = hit_radius_mm
        self.max_candidates = max_candidates

    def fit(self, X: Sequence[Volume3D], y: Sequence[GroundTruth]) -> "LogCandidateDetector":
        _check_volumes_truths(X, y)
        grid = OptimizeGrid(
            sigma_values_mm=tuple(float(s) for s in self.sigma_values_mm),
            sigma_step_mm=float(self.sigma_step_mm),
            thresholds=tuple(float(t) for t in self.thresholds))
        result = optimize_log_params(
            X, y, grid, self.min_sensitivity, self.hit_radius_mm, self.max_candidates)
        self.params_ = result.params
        self.mean_sensitivity_ = result.mean_sensitivity
        self.mean_candidates_ = result.mean_candidates
        self.reached_target_ = result.reached_target
        return self

    def detect(self, volume: Volume3D) -> CandidateSet:
        check_is_fitted(self, "params_")
        return detect_candidates(volume, self.params_, self.max_candidates)

    def predict(self, X: Sequence[Volume3D]) -> list[CandidateSet]:
        check_is_fitted(self, "params_")
        return [self.detect(v) for v in X]


class SurrogateCandidateDetector(BaseEstimator):
    """A trained conv surrogate for the filter bank, with a fitted threshold.

    If ``log_params`` is None, the LoG stage is itself fitted (default
    grid) on the training data before building targets.
    """

    def __init__(self, log_params=None, kernel_size=3, hidden_channels=3,
                 candidate_value=0.001, smooth_sigma_mm=1.0, epochs=120,
                 learning_rate=0.002, augment=True, min_sensitivity=0.95,
                 hit_radius_mm=1.5, tau_grid_size=256, max_candidates=100000,
                 random_state=0):
        self.log_params = log_params
        self.kernel_size = kernel_size
        self.hidden_channels = hidden_channels
        self.candidate_value = candidate_value
        self.smooth_sigma_mm = smooth_sigma_mm
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.augment = augment
        self.min_sensitivity = min_sensitivity
        self.hit_radius_mm = hit_radius_mm
        self.tau_grid_size = tau_grid_size
        self.max_candidates = max_candidates
        self.random_state = random_state

    def fit(self, X: Sequence[Volume3D], y: Sequence[GroundTruth]) -> "SurrogateCandidateDetector":
        _check_volumes_truths(X, y)
        spacing = X[0].spacing_mm
        if self.log_params is None:
            self.log_params_ = LogCandidateDetector(
                min_sensitivity=self.min_sensitivity,
                hit_radius_mm=self.hit_radius_mm,
                max_candidates=self.max_candidates).fit(X, y).params_
        else:
            self.log_params_ = self.log_params
        spec = SurrogateSpec.for_log_params(
            self.log_params_, spacing, self.kernel_size, self.hidden_channels)
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        net = build_surrogate_net(spec)
        net.initialize(np.random.default_rng(seeds[0]))
        targets = build_training_targets(
            X, y, self.log_params_, self.candidate_value,
            self.smooth_sigma_mm, self.hit_radius_mm, self.max_candidates)
        self.train_log_ = train_surrogate(
            net, X, targets, self.epochs, np.random.default_rng(seeds[1]),
            self.learning_rate, self.augment)
        responses = [predict_response(net, v) for v in X]
        sel = select_threshold(
            responses, y, spacing, self.min_sensitivity,
            self.hit_radius_mm, self.tau_grid_size)
        self.spec_ = spec
        self.tau_ = sel.tau
        self.reached_target_ = sel.reached_target
        self.model_ = SurrogateModel(
            network=net, spec=spec, tau=sel.tau,
            candidate_value=self.candidate_value,
            smooth_sigma_mm=self.smooth_sigma_mm)
        return self

    def detect(self, volume: Volume3D) -> CandidateSet:
        check_is_fitted(self, "model_")
        return self.model_.detect(volume, self.max_candidates)

    def predict(self, X: Sequence[Volume3D]) -> list[CandidateSet]:
        check_is_fitted(self, "model_")
        return [self.detect(v) for v in X]

    def predict_response(self, volume: Volume3D) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_response(self.model_.network, volume)


class CropProbabilityClassifier(BaseEstimator):
    """Second-stage lesion probability for candidate points."""

    def __init__(self, edge_mm=16.0, channels=(8, 16, 32, 64), kernel_size=3,
                 iterations=400, batch_pairs=16, learning_rate=5e-5,
                 augment=True, negative_min_mm=2.0, random_state=0):
        self.edge_mm = edge_mm
        self.channels = channels
        self.kernel_size = kernel_size
        self.iterations = iterations
        self.batch_pairs = batch_pairs
        self.learning_rate = learning_rate
        self.augment = augment
        self.negative_min_mm = negative_min_mm
        self.random_state = random_state

    def _crop_spec(self) -> CropSpec:
        return CropSpec(edge_mm=float(self.edge_mm),
                        channels=tuple(int(c) for c in self.channels),
                        kernel_size=int(self.kernel_size))

    def fit(self, X: Sequence[Volume3D], y: Sequence[GroundTruth],
            candidates: Sequence[CandidateSet] | None = None) -> "CropProbabilityClassifier":
        _check_volumes_truths(X, y)
        if candidates is None or len(candidates) != len(X):
            raise ConfigError("fit needs one CandidateSet per volume")
        spec = self._crop_spec()
        rng = np.random.default_rng(self.random_state)
        net = build_classifier_net(spec, spec.crop_vox(X[0].spacing_mm))
        net.initialize(rng)
        aug = CropAugmentation() if self.augment else CropAugmentation.none()
        self.train_log_ = train_classifier(
            net, X, y, candidates, self.iterations, self.batch_pairs, rng,
            self.learning_rate, spec, aug, self.negative_min_mm)
        self.network_ = net
        return self

    def predict_proba(self, volume: Volume3D, candidates: CandidateSet) -> np.ndarray:
        check_is_fitted(self, "network_")
        return classify_candidates(self.network_, volume, candidates, self._crop_spec())
