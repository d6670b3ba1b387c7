"""scikit-learn style wrappers around the three training stages.

Images are passed as ``[n, H, W]`` float arrays with pixels in ``[0, 1]``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .rng import stream
from .stage1 import PretrainedState, embed, pretrain_mae, stage1_probabilities, train_stage1
from .stage2 import fit_dual_modules, reconstruct_mean, score_dual, score_reconstruction
from .utils import check_images


def _config(config):
    return RunConfig() if config is None else config


class MaskedAutoencoder(TransformerMixin, BaseEstimator):
    """Masked-patch reconstruction pre-training; ``transform`` gives pooled embeddings."""

    def __init__(self, config=None, random_state=0):
        self.config = config
        self.random_state = random_state

    def fit(self, X, y=None):
        cfg = _config(self.config)
        X = check_images(X, cfg.image_size)
        self.pretrained_ = pretrain_mae(X, cfg, stream(self.random_state, "pretrain"))
        self.loss_curve_ = list(self.pretrained_.loss_curve)
        self.image_size_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "pretrained_")
        cfg = _config(self.config)
        return embed(self.pretrained_.encoder, check_images(X, self.image_size_, allow_empty=True), cfg)

    def reconstruct(self, X, num_masks=None):
        """Mean of ``num_masks`` masked reconstructions per image (``l_test`` by default)."""
        check_is_fitted(self, "pretrained_")
        cfg = _config(self.config)
        X = check_images(X, self.image_size_)
        L = cfg.l_test if num_masks is None else num_masks
        return reconstruct_mean(self.pretrained_.params, X, L, stream(self.random_state, "reconstruct"), cfg)


class ProxyAnomalyClassifier(ClassifierMixin, BaseEstimator):
    """MLP head on frozen encoder features, trained to spot AnatPaste anomalies.

    ``pretrained`` is a :class:`PretrainedState` or a fitted
    :class:`MaskedAutoencoder`; its encoder is never updated.
    """

    def __init__(self, pretrained=None, config=None, random_state=0):
        self.pretrained = pretrained
        self.config = config
        self.random_state = random_state

    def _state(self):
        if isinstance(self.pretrained, MaskedAutoencoder):
            check_is_fitted(self.pretrained, "pretrained_")
            return self.pretrained.pretrained_
        if isinstance(self.pretrained, PretrainedState):
            return self.pretrained
        raise TypeError("pretrained must be a PretrainedState or a fitted MaskedAutoencoder")

    def fit(self, X, y=None):
        """Fit on normal images ``X``; synthetic anomalies are generated internally."""
        cfg = _config(self.config)
        X = check_images(X, cfg.image_size)
        state = self._state()
        self.result_ = train_stage1(state.encoder, X, cfg, stream(self.random_state, "stage1"))
        self.head_ = self.result_.head
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        cfg = _config(self.config)
        return stage1_probabilities(self._state().encoder, self.head_, check_images(X, cfg.image_size), cfg)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class AMAE(BaseEstimator):
    """Dual-distribution detector: fit on normal and unlabeled images, score new ones.

    Higher :meth:`decision_function` values are more anomalous. Scoring draws
    its masks from fixed streams, so repeated calls return identical values.
    """

    def __init__(self, config=None, random_state=0, module_b_source="pseudo"):
        self.config = config
        self.random_state = random_state
        self.module_b_source = module_b_source

    def fit(self, X_normal, X_unlabeled):
        cfg = _config(self.config)
        X_normal = check_images(X_normal, cfg.image_size, name="X_normal")
        X_unlabeled = check_images(X_unlabeled, cfg.image_size, name="X_unlabeled")
        seed = self.random_state
        self.pretrained_ = pretrain_mae(np.concatenate([X_normal, X_unlabeled]), cfg, stream(seed, "pretrain"))
        self.stage1_ = train_stage1(self.pretrained_.encoder, X_normal, cfg, stream(seed, "stage1"))
        self.dual_ = fit_dual_modules(
            X_normal, X_unlabeled, self.pretrained_, self.stage1_, cfg, self._streams(), self.module_b_source
        )
        self.pseudo_labels_ = self.dual_.pseudo
        return self

    def _streams(self):
        seed = self.random_state
        return lambda name: stream(seed, "stage2", name)

    def anomaly_maps(self, X):
        """Pixelwise inter-discrepancy maps ``[n, H, W]``."""
        return self._score(X).pixel_scores

    def decision_function(self, X):
        return self._score(X).image_scores

    def score_samples(self, X):
        """Negated anomaly score, so that larger means more normal."""
        return -self.decision_function(X)

    def reconstruction_error(self, X):
        """Single-module baseline: mean ``|mean_A - x|`` per image."""
        check_is_fitted(self, "dual_")
        cfg = _config(self.config)
        X = check_images(X, cfg.image_size)
        rng = stream(self.random_state, "baseline")
        return score_reconstruction(self.dual_.module_a, X, cfg.l_test, rng, cfg).image_scores

    def _score(self, X):
        check_is_fitted(self, "dual_")
        cfg = _config(self.config)
        return score_dual(self.dual_, check_images(X, cfg.image_size), cfg, self._streams())
