"""scikit-learn style wrappers around decomposition and K-to-1 training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_image_stack, check_label_map, check_pairs
from .data import Sample
from .decomposition import DEFAULT_T_SHAPE, decompose, n_sub_maps, normalize_method
from .metrics import dice
from .network import make_spec, build
from .training import TrainConfig, default_window, fit, predict_proba


class AnnotationDecomposer(TransformerMixin, BaseEstimator):
    """Stateless transformer turning label maps into stacked sub-maps.

    ``transform`` returns an int array of shape (n_samples, K, *spatial).
    """

    def __init__(self, method="class", n_classes=None, t_shape=DEFAULT_T_SHAPE, connectivity=None, n_modules=None):
        self.method = method
        self.n_classes = n_classes
        self.t_shape = t_shape
        self.connectivity = connectivity
        self.n_modules = n_modules

    def fit(self, y, _unused=None):
        maps = [check_label_map(m) for m in y]
        self.method_ = normalize_method(self.method)
        self.n_classes_ = self.n_classes or max(1, max(int(m.max()) for m in maps))
        self.n_sub_maps_ = n_sub_maps(self.method_, self.n_classes_, self.n_modules)
        return self

    def transform(self, y):
        if not hasattr(self, "method_"):
            raise NotFittedError("AnnotationDecomposer is not fitted")
        out = [
            decompose(
                m,
                self.method_,
                n_classes=self.n_classes_,
                t_shape=self.t_shape,
                connectivity=self.connectivity,
                n_modules=self.n_sub_maps_,
            ).stacked()
            for m in y
        ]
        return np.stack(out)


class KTo1Segmenter(BaseEstimator):
    """Decompose-and-integrate segmenter.

    ``fit(X, y)`` takes grayscale images (n, *spatial) in [0, 1] and integer
    label maps; each training window is decomposed with ``decomposition``
    and the K-to-1 network is trained on the composite loss.
    ``decomposition="identity"`` gives the no-decomposition ablation with
    ``n_modules`` stage-1 modules.
    """

    def __init__(
        self,
        n_classes=None,
        decomposition="class",
        n_modules=None,
        depth=2,
        base_channels=8,
        kernel_size=3,
        feed_raw_to_integrator=True,
        lam=None,
        t_shape=DEFAULT_T_SHAPE,
        connectivity=None,
        window=None,
        batch_size=8,
        max_iters=60000,
        lr=5e-4,
        lr_drop_iter=30000,
        lr_after_drop=5e-5,
        rotate=True,
        flip=True,
        overlap=None,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.decomposition = decomposition
        self.n_modules = n_modules
        self.depth = depth
        self.base_channels = base_channels
        self.kernel_size = kernel_size
        self.feed_raw_to_integrator = feed_raw_to_integrator
        self.lam = lam
        self.t_shape = t_shape
        self.connectivity = connectivity
        self.window = window
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.lr = lr
        self.lr_drop_iter = lr_drop_iter
        self.lr_after_drop = lr_after_drop
        self.rotate = rotate
        self.flip = flip
        self.overlap = overlap
        self.random_state = random_state

    def _train_config(self, ndim: int) -> TrainConfig:
        return TrainConfig(
            window=self.window or default_window(ndim),
            batch=self.batch_size,
            max_iters=self.max_iters,
            lr=self.lr,
            lr_drop_iter=self.lr_drop_iter,
            lr_after_drop=self.lr_after_drop,
            seed=self.random_state,
            rotate=self.rotate,
            flip=self.flip,
            t_shape=self.t_shape,
            connectivity=self.connectivity,
        )

    def fit(self, X, y):
        images, labels = check_pairs(X, y, self.n_classes)
        n_classes = self.n_classes or max(1, max(int(m.max()) for m in labels))
        ndim = images[0].ndim
        spec = make_spec(
            n_classes,
            self.decomposition,
            n_modules=self.n_modules,
            depth=self.depth,
            base_channels=self.base_channels,
            kernel_size=self.kernel_size,
            feed_raw_to_integrator=self.feed_raw_to_integrator,
            lam=self.lam,
            spatial_dims=ndim,
        )
        config = self._train_config(ndim)
        samples = [Sample(x, t, f"{i}") for i, (x, t) in enumerate(zip(images, labels))]
        self.model_ = build(spec, self.random_state)
        result = fit(self.model_, samples, config)
        self.spec_ = spec
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes + 1)
        self.log_ = result.log
        self.n_iter_ = result.state.iteration
        self.window_ = config.window
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("KTo1Segmenter is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel class probabilities, shape (n, n_classes + 1, *spatial)."""
        self._check_fitted()
        images = check_image_stack(X)
        overlap = self.overlap if self.overlap is not None else min(self.window_) // 2
        return np.stack([predict_proba(self.model_, x, self.window_, overlap) for x in images])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1).astype(np.int64)

    def score(self, X, y) -> float:
        """Mean foreground Dice over classes 1..n_classes and samples."""
        pred = self.predict(X)
        scores = [
            dice(p == k, check_label_map(t) == k)
            for p, t in zip(pred, y)
            for k in range(1, self.n_classes_ + 1)
        ]
        return float(np.mean(scores))
