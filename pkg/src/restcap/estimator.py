"""Scikit-learn-style facade: fit the captioner on an unlabeled video
world, predict captions, score with the text-accuracy metric. All loop
hyper-parameters are constructor params, so the estimator composes with
``clone``/``get_params`` and the usual sklearn tooling.
"""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator

from .ablations import eval_state, run_on_world
from .errors import DataError
from .evaluation import generate_predictions
from .loop import RestConfig
from .synthworld import World, load_world


class RestCaptioner(BaseEstimator):
    """Retrieval-augmented self-trained captioner.

    fit(X) accepts a World or a path to a world directory; no labels are
    consumed during training. predict returns one caption per video in
    manifest order; score computes top-1 caption-to-class accuracy
    against the world's labels.
    """

    def __init__(self, k=3, h=20, r=4, total_epochs=12, beam=3, seed=0,
                 batch_size=16, lr_init=3e-3, lr_min=3e-4,
                 weight_decay=0.001, label_smoothing=0.2,
                 adapter_enabled=True, d_model=64, n_blocks=2,
                 gen_max_new=16):
        self.k = k
        self.h = h
        self.r = r
        self.total_epochs = total_epochs
        self.beam = beam
        self.seed = seed
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.adapter_enabled = adapter_enabled
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.gen_max_new = gen_max_new

    def _config(self) -> RestConfig:
        return RestConfig.synthetic(
            k=self.k, h=self.h, r=self.r, total_epochs=self.total_epochs,
            beam=self.beam, seed=self.seed, batch_size=self.batch_size,
            lr_init=self.lr_init, lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            label_smoothing=self.label_smoothing,
            adapter_enabled=self.adapter_enabled, d_model=self.d_model,
            n_blocks=self.n_blocks, gen_max_new=self.gen_max_new)

    @staticmethod
    def _as_world(X) -> World:
        if isinstance(X, World):
            return X
        if isinstance(X, (str, Path)):
            return load_world(X)
        raise DataError("X must be a World or a path to a world directory")

    def fit(self, X, y=None):
        world = self._as_world(X)
        self.world_ = world
        self.state_ = run_on_world(world, self._config())
        self.model_ = self.state_.model
        self.vocab_ = self.state_.vocab
        return self

    def predict(self, X=None) -> list[str]:
        self._check_fitted()
        world = self.world_ if X is None else self._as_world(X)
        preds = generate_predictions(
            self.model_, world.manifest, self.vocab_, self.state_.config.prompt,
            self.state_.config.beam, self.state_.config.gen_max_new)
        return [preds[v] for v in world.manifest.video_ids()]

    def score(self, X=None, y=None) -> float:
        self._check_fitted()
        world = self.world_ if X is None else self._as_world(X)
        report, _ = eval_state(self.state_, world, "standard")
        return report.accuracy(1)

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise DataError("estimator is not fitted; call fit first")
