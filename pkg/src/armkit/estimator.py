"""scikit-learn compatible classifier wrapping the toy transformer."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from . import aatd
from .arm import ARMConfig
from .config import arm_from_dict, arm_to_dict, model_from_dict
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, cross_entropy, softmax
from .training import EpochLog, make_optimizer, run_epochs
from .vit import ModelConfig, Taps, count_parameters, init_params, model_forward, named_buffers, named_parameters


def check_images(X, cfg: ModelConfig) -> np.ndarray:
    """Validate ``X`` and bring it to (n, C, H, W) float64.

    Accepts (n, C, H, W), (n, H, W) for single-channel models, or flat
    (n, C*H*W) rows.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    size, c = cfg.image_size, cfg.in_chans
    if X.ndim == 2:
        if X.shape[1] != c * size * size:
            raise DimensionError(f"flat images need {c * size * size} features, got {X.shape[1]}")
        X = X.reshape(-1, c, size, size)
    elif X.ndim == 3:
        if c != 1:
            raise DimensionError(f"(n, H, W) input needs in_chans == 1, model has {c}")
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (c, size, size):
        raise DimensionError(f"expected images of shape (n, {c}, {size}, {size}), got {X.shape}")
    return X


class ARMViTClassifier(ClassifierMixin, BaseEstimator):
    """Toy vision transformer classifier with an optional aliasing reduction module.

    Parameters
    ----------
    model : ModelConfig, optional
        Topology and ARM placement. Defaults to ``ModelConfig()``.
    arm : ARMConfig, optional
        Filter variant; required iff ``model.arm_placement != "none"``.
    epochs, batch_size, lr, weight_decay, optimizer, momentum :
        Training loop settings (``optimizer`` is ``"adamw"`` or ``"sgd"``).
    random_state : int
        Seeds weight init (ARM weights on a separate stream) and shuffling.
    """

    def __init__(self, model: ModelConfig | None = None, arm: ARMConfig | None = None, epochs: int = 10,
                 batch_size: int = 32, lr: float = 3e-4, weight_decay: float = 0.05, optimizer: str = "adamw",
                 momentum: float = 0.9, random_state: int = 0, eval_batch_size: int = 128):
        self.model = model
        self.arm = arm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.momentum = momentum
        self.random_state = random_state
        self.eval_batch_size = eval_batch_size

    @property
    def model_config_(self) -> ModelConfig:
        return self.model if self.model is not None else ModelConfig()

    def _init(self, classes: np.ndarray) -> None:
        cfg = self.model_config_
        if len(classes) != cfg.num_classes:
            raise ConfigurationError(f"model has num_classes={cfg.num_classes}, labels have {len(classes)} classes")
        self.classes_ = classes
        self.params_ = init_params(cfg, self.arm, int(self.random_state))
        self.n_parameters_ = count_parameters(self.params_)

    def fit(self, X, y, eval_sets: dict | None = None):
        """Train from scratch. ``eval_sets`` maps a split name to (X, y),
        scored after every epoch into ``history_``."""
        cfg = self.model_config_
        X = check_images(X, cfg)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise DimensionError(f"X has {len(X)} samples, y has {len(y)}")
        classes, y_idx = np.unique(y, return_inverse=True)
        self._init(classes)
        evals = {name: (check_images(Xe, cfg), np.asarray(ye)) for name, (Xe, ye) in (eval_sets or {}).items()}

        params = [t for _, t in named_parameters(self.params_)]
        opt = make_optimizer(self.optimizer, params, self.lr, self.weight_decay, self.momentum)
        rng = np.random.default_rng([int(self.random_state), 2])

        def loss_fn(xb, yb):
            logits = model_forward(xb, self.params_, cfg, True, self.arm)
            return cross_entropy(logits, yb), logits.data

        def on_epoch(_):
            return {name: self._loss_accuracy(Xe, ye) for name, (Xe, ye) in evals.items()}

        self.history_: list[EpochLog] = run_epochs(
            loss_fn, params, X, y_idx, epochs=self.epochs, batch_size=self.batch_size, optimizer=opt,
            rng=rng, on_epoch=on_epoch if evals else None,
        )
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_images(X, self.model_config_)
        chunks = [
            model_forward(X[i : i + self.eval_batch_size], self.params_, self.model_config_, False, self.arm).data
            for i in range(0, len(X), self.eval_batch_size)
        ]
        return np.concatenate(chunks)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def _loss_accuracy(self, X, y) -> tuple[float, float]:
        logits = self.decision_function(X)
        y_idx = np.searchsorted(self.classes_, y)
        loss = cross_entropy(Tensor(logits), y_idx).item()
        return loss, float((logits.argmax(axis=1) == y_idx).mean())

    def attention_maps(self, X, stages=None) -> dict[tuple[int, int], np.ndarray]:
        """Folded (n, C, H', W') attention-branch maps per (stage, block), inference mode."""
        check_is_fitted(self, "params_")
        cfg = self.model_config_
        X = check_images(X, cfg)
        out: dict[tuple[int, int], list] = {}
        for i in range(0, len(X), self.eval_batch_size):
            taps = Taps()
            model_forward(X[i : i + self.eval_batch_size], self.params_, cfg, False, self.arm, taps=taps)
            for s, b, m in taps.maps:
                if stages is None or s in stages:
                    out.setdefault((s, b), []).append(m)
        return {key: np.concatenate(chunks) for key, chunks in out.items()}

    def save(self, directory) -> Path:
        """Checkpoint: one AATD dump per tensor plus ``manifest.json``."""
        check_is_fitted(self, "params_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for name, t in named_parameters(self.params_):
            aatd.write(directory / f"{name}.aatd", t.data)
            names.append(name)
        buffers = []
        for name, arr, _ in named_buffers(self.params_):
            aatd.write(directory / f"{name}.aatd", arr)
            buffers.append(name)
        manifest = {
            "model": self.model_config_.to_dict(),
            "arm": arm_to_dict(self.arm),
            "classes": self.classes_.tolist(),
            "random_state": int(self.random_state),
            "parameters": names,
            "buffers": buffers,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "ARMViTClassifier":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = model_from_dict(manifest["model"])
        arm = arm_from_dict(manifest["arm"]) if manifest["arm"] is not None else None
        est = cls(model=model, arm=arm, random_state=manifest["random_state"])
        est._init(np.asarray(manifest["classes"]))
        tensors = dict(named_parameters(est.params_))
        if sorted(tensors) != sorted(manifest["parameters"]):
            raise ConfigurationError(f"checkpoint {directory} does not match its model config")
        for name, t in tensors.items():
            t.data = aatd.read(directory / f"{name}.aatd").reshape(t.shape)
        for name, arr, owner in named_buffers(est.params_):
            stat = name.rsplit(".", 1)[-1]
            setattr(owner.modulation, stat, aatd.read(directory / f"{name}.aatd").reshape(arr.shape))
        return est
