"""scikit-learn style wrapper around the two-branch model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import CrossViewDataset, polar_transform
from .evaluation import DescriptorIndex, RecallReport, build_index, recall_at_k
from .exceptions import UsageError
from .model import EgoTrModel, ModelConfig, descriptors
from .training import TrainConfig, TrainResult, fit
from .validation import check_images, check_pairs


class EgoTR(TransformerMixin, BaseEstimator):
    """Cross-view retrieval estimator.

    ``fit(X, y)`` trains on matched pairs where ``X`` holds ground panoramas
    and ``y`` the aerial images of the same locations, both shaped
    (n, 3, H, W) with values in [0, 1]. ``transform`` maps images of either
    view to L2-normalized descriptors, ``predict`` retrieves the nearest
    indexed aerial image and ``score`` reports ground-to-aerial r@1.

    Parameters mirror :class:`~egotr.model.ModelConfig` and
    :class:`~egotr.training.TrainConfig`; see those for meaning.
    """

    def __init__(self, embed_dim=64, depth=4, num_heads=4, stem_channels=(16, 32, 64),
                 ground_size=(64, 256), aerial_size=(128, 128), mode="self_cross",
                 use_pos_embed=True, use_polar=False, descriptor_norm=True, alpha=10.0,
                 lr=1e-4, lr_min=0.0, weight_decay=0.03, batch_size=32, epochs=50,
                 warmup_steps=0, clip_norm=1.0, random_state=0, verbose=False):
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.stem_channels = stem_channels
        self.ground_size = ground_size
        self.aerial_size = aerial_size
        self.mode = mode
        self.use_pos_embed = use_pos_embed
        self.use_polar = use_polar
        self.descriptor_norm = descriptor_norm
        self.alpha = alpha
        self.lr = lr
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.verbose = verbose

    def _model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, depth=self.depth, num_heads=self.num_heads,
                           stem_channels=tuple(self.stem_channels),
                           ground_size=tuple(self.ground_size), aerial_size=tuple(self.aerial_size),
                           mode=self.mode, use_pos_embed=self.use_pos_embed,
                           use_polar=self.use_polar, descriptor_norm=self.descriptor_norm)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha,
                           lr=self.lr, lr_min=self.lr_min, weight_decay=self.weight_decay,
                           warmup_steps=self.warmup_steps, clip_norm=self.clip_norm,
                           seed=self.random_state)

    def _prepare(self, X, view: str) -> np.ndarray:
        cfg = self.model_.config if hasattr(self, "model_") else self._model_config()
        if view == "ground":
            return check_images(X, cfg.ground_size, "ground")
        if view != "aerial":
            raise UsageError(f"view must be 'ground' or 'aerial', got {view!r}")
        if cfg.use_polar and tuple(np.shape(X)[-2:]) == cfg.aerial_size:
            X = polar_transform(check_images(X, cfg.aerial_size, "aerial"), cfg.ground_size)
        return check_images(X, cfg.branch_aerial_size, "aerial")

    def fit(self, X, y, X_val=None, y_val=None):
        """Train from scratch on ground images ``X`` paired with aerial images ``y``."""
        X, y = check_pairs(X, y)
        config = self._model_config()
        ground = self._prepare(X, "ground")
        aerial = self._prepare(y, "aerial")
        ids = [f"{k:05d}" for k in range(len(ground))]
        train = CrossViewDataset(ground, aerial, ids, np.zeros(len(ids)), {"train": ids}, {})
        self.model_ = EgoTrModel.init(config, self.random_state)
        evaluate = None
        if X_val is not None:
            g_val, a_val = self._prepare(X_val, "ground"), self._prepare(y_val, "aerial")
            evaluate = lambda m: _r1(m, g_val, a_val)  # noqa: E731
        log = (lambda m, met, opt, best: print(  # noqa: E731
            f"epoch {met.epoch}: loss {met.mean_loss:.4f} lr {met.lr:.2e}")) if self.verbose else None
        self.result_: TrainResult = fit(self.model_, train, self._train_config(),
                                        evaluate=evaluate, on_epoch_end=log)
        self.history_ = self.result_.history
        self.n_features_out_ = config.embed_dim
        return self

    def transform(self, X, view: str = "ground") -> np.ndarray:
        """Descriptors (n, D) for images of the given view."""
        check_is_fitted(self, "model_")
        return descriptors(self.model_, self._prepare(X, view), view)

    def build_index(self, references, ids=None) -> DescriptorIndex:
        """Index aerial reference images for :meth:`predict`."""
        check_is_fitted(self, "model_")
        self.index_ = build_index(self.model_, self._prepare(references, "aerial"), ids)
        return self.index_

    def predict(self, X, k: int = 1):
        """Ids of the ``k`` nearest indexed references for each ground image."""
        check_is_fitted(self, ["model_", "index_"])
        q = self.transform(X, "ground")
        dist = ((q[:, None, :].astype(np.float64) - self.index_.matrix[None]) ** 2).sum(-1)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        ids = np.asarray(self.index_.ids, dtype=object)[order]
        return ids[:, 0] if k == 1 else ids

    def recall(self, X, y) -> RecallReport:
        """Full r@K report with ``y`` (paired by position) as the reference set."""
        check_is_fitted(self, "model_")
        X, y = check_pairs(X, y)
        ids = [str(k) for k in range(len(X))]
        index = build_index(self.model_, self._prepare(y, "aerial"), ids)
        return recall_at_k(self.transform(X, "ground"), index, ids)

    def score(self, X, y) -> float:
        """Ground-to-aerial r@1 with ``y`` as the reference set."""
        return self.recall(X, y).r1

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "model_")
        return np.array([f"egotr{k}" for k in range(self.n_features_out_)], dtype=object)


def _r1(model, ground, aerial) -> float:
    ids = [str(k) for k in range(len(ground))]
    index = build_index(model, aerial, ids)
    return recall_at_k(descriptors(model, ground, "ground"), index, ids).r1

