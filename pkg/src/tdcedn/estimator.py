"""scikit-learn style wrappers around the network, NMS thinning and fusion.

``X`` is a sequence of ``(3, H, W)`` images in ``[0, 1]`` (sizes may differ);
``y`` holds, per image, one binary contour map or a list of annotator maps.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import data as D
from . import inference as I
from .evaluation import MatchConfig, nms_thin, ods_ois_ap, pr_sweep
from .network import VGG16_WIDTHS, TDCEDN, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .validation import check_annotations, check_images, check_prob_map, check_same_length


def _stack(maps: list[np.ndarray]):
    if len({m.shape for m in maps}) == 1:
        return np.stack(maps)
    return maps


class ContourDetector(BaseEstimator):
    """Encoder-decoder contour detector trained with deeply supervised side outputs.

    ``predict_proba`` returns contour probability maps, ``predict`` the
    NMS-thinned maps binarized at ``threshold`` and ``score`` the ODS
    F-measure against the union of the given annotations.
    """

    def __init__(
        self,
        widths=VGG16_WIDTHS,
        base_lr: float = 1e-6,
        max_iter: int = 20000,
        momentum: float = 0.9,
        weight_decay: float = 2e-4,
        lr_power: float = 0.8,
        input_size: int = D.TRAIN_SIZE,
        consensus: str = "over3",
        rotations=(0, 90, 180, 270),
        horizontal_flip: bool = True,
        dropout_rate: float = 0.5,
        precision: str = "f32",
        border_px: int = I.BORDER_PX,
        threshold: float = 0.5,
        seed: int = 0,
        out_dir=None,
    ):
        self.widths = widths
        self.base_lr = base_lr
        self.max_iter = max_iter
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_power = lr_power
        self.input_size = input_size
        self.consensus = consensus
        self.rotations = rotations
        self.horizontal_flip = horizontal_flip
        self.dropout_rate = dropout_rate
        self.precision = precision
        self.border_px = border_px
        self.threshold = threshold
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            max_iter=self.max_iter,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_power=self.lr_power,
            input_size=self.input_size,
            consensus=self.consensus,
            rotations=tuple(self.rotations),
            horizontal_flip=self.horizontal_flip,
            seed=self.seed,
        )

    def fit(self, X, y):
        images = check_images(X)
        check_same_length(images, y, "X and y")
        samples = []
        for i, (img, ann) in enumerate(zip(images, y)):
            maps = check_annotations(ann, f"y[{i}]")
            samples.append(D.Sample(img, maps, str(i)))
        cfg = self._train_config()
        graph = TDCEDN(self.widths, dropout_rate=self.dropout_rate, seed=self.seed, precision=self.precision)
        result = train(graph, samples, cfg, out_dir=self.out_dir)
        self.graph_ = graph.eval()
        self.loss_log_ = result.log
        self.n_iter_ = result.state.iteration
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> "ContourDetector":
        graph = load_checkpoint(path, dropout_rate=params.get("dropout_rate", 0.5))
        params.setdefault("widths", graph.widths)
        params.setdefault("precision", graph.precision.value)
        est = cls(**params)
        est.graph_ = graph.eval()
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "graph_")
        save_checkpoint(self.graph_, path)

    def predict_proba(self, X):
        check_is_fitted(self, "graph_")
        return _stack([I.predict(self.graph_, img, self.border_px) for img in check_images(X)])

    def predict(self, X):
        probs = self.predict_proba(X)
        return _stack([(nms_thin(p) >= self.threshold).astype(np.uint8) for p in probs])

    def score(self, X, y) -> float:
        probs = self.predict_proba(X)
        check_same_length(probs, y, "X and y")
        gts = [D.consensus(check_annotations(a, f"y[{i}]"), "all") for i, a in enumerate(y)]
        return ods_ois_ap(pr_sweep([nms_thin(p) for p in probs], gts, MatchConfig())).ods


class EdgeThinner(TransformerMixin, BaseEstimator):
    """Stateless transformer applying oriented non-maximum suppression."""

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def fit(self, X, y=None):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.n_maps_seen_ = len(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_maps_seen_")
        return _stack([nms_thin(check_prob_map(p, f"map {i}"), self.sigma) for i, p in enumerate(X)])


class FusedContourDetector(BaseEstimator):
    """Two detectors trained on ``over3`` and ``all`` consensus labels, averaged with weight ``gamma``."""

    def __init__(self, detector=None, gamma: float = 0.5, threshold: float = 0.5):
        self.detector = detector
        self.gamma = gamma
        self.threshold = threshold

    def fit(self, X, y):
        base = self.detector if self.detector is not None else ContourDetector()
        self.over3_ = clone(base).set_params(consensus="over3").fit(X, y)
        self.all_ = clone(base).set_params(consensus="all").fit(X, y)
        return self

    @classmethod
    def from_detectors(cls, over3: ContourDetector, all_: ContourDetector, gamma: float = 0.5) -> "FusedContourDetector":
        est = cls(gamma=gamma)
        est.over3_, est.all_ = over3, all_
        return est

    def predict_proba(self, X):
        check_is_fitted(self, ("over3_", "all_"))
        cfg = I.FusionConfig(self.gamma)
        a, b = self.over3_.predict_proba(X), self.all_.predict_proba(X)
        return _stack([I.fuse(p, q, cfg) for p, q in zip(a, b)])

    def predict(self, X):
        return _stack([(nms_thin(p) >= self.threshold).astype(np.uint8) for p in self.predict_proba(X)])
