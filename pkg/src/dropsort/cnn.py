"""From-scratch convolutional classifier.

Stack: N stages of (valid conv, ReLU, max-pool), then dense + ReLU,
dropout with inverted scaling, dense to class logits, softmax. Plain SGD
with a fixed learning rate; all math in float64 on numpy arrays, with
the convolutions delegated to the kernels backend.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .imgproc import NormalizedFrame

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    kernel_px: int = 15
    n_filters: int = 8

    def __post_init__(self):
        if self.kernel_px < 1 or self.n_filters < 1:
            raise ValueError("kernel_px and n_filters must be positive")


@dataclass(frozen=True)
class NetworkConfig:
    input_px: int = 128
    conv_layers: tuple[ConvSpec, ...] = (
        ConvSpec(15, 8), ConvSpec(15, 16), ConvSpec(15, 32))
    pool_window: int = 2
    pool_stride: int = 2
    dense_units: int = 128
    dropout_rate: float = 0.4
    n_classes: int = 3

    def __post_init__(self):
        if self.input_px < 1 or self.dense_units < 1 or self.n_classes < 2:
            raise ValueError("bad network dimensions")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ValueError("pool window and stride must be positive")
        self.shape_trace()  # rejects any config that collapses below 1 px

    def shape_trace(self) -> list[int]:
        """Spatial size after each conv and pool, in order."""
        s = self.input_px
        trace = []
        for spec in self.conv_layers:
            s = s - spec.kernel_px + 1
            if s < 1:
                raise ValueError(f"conv kernel {spec.kernel_px} collapses {self}")
            trace.append(s)
            s = (s - self.pool_window) // self.pool_stride + 1
            if s < 1:
                raise ValueError(f"pooling collapses spatial size in {self}")
            trace.append(s)
        return trace

    def flat_features(self) -> int:
        side = self.shape_trace()[-1]
        return self.conv_layers[-1].n_filters * side * side


@dataclass
class Params:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    dense1_w: np.ndarray
    dense1_b: np.ndarray
    dense2_w: np.ndarray
    dense2_b: np.ndarray
    seed: int | None = None

    def items(self) -> list[tuple[str, np.ndarray]]:
        """Named arrays in canonical layer order (checkpoint order)."""
        out = []
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            out.append((f"conv{i}_w", w))
            out.append((f"conv{i}_b", b))
        out += [("dense1_w", self.dense1_w), ("dense1_b", self.dense1_b),
                ("dense2_w", self.dense2_w), ("dense2_b", self.dense2_b)]
        return out

    def copy(self) -> "Params":
        return copy.deepcopy(self)

    def zeros_like(self) -> "Params":
        return Params(conv_w=[np.zeros_like(w) for w in self.conv_w],
                      conv_b=[np.zeros_like(b) for b in self.conv_b],
                      dense1_w=np.zeros_like(self.dense1_w),
                      dense1_b=np.zeros_like(self.dense1_b),
                      dense2_w=np.zeros_like(self.dense2_w),
                      dense2_b=np.zeros_like(self.dense2_b))

    def add_scaled(self, other: "Params", alpha: float) -> None:
        for (_, dst), (_, src) in zip(self.items(), other.items()):
            dst += alpha * src


def init_params(cfg: NetworkConfig, seed) -> Params:
    """Uniform init scaled by fan-in (variance 1/fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    in_ch = 1
    for spec in cfg.conv_layers:
        fan_in = in_ch * spec.kernel_px ** 2
        a = np.sqrt(3.0 / fan_in)
        conv_w.append(rng.uniform(-a, a,
                                  (spec.n_filters, in_ch, spec.kernel_px,
                                   spec.kernel_px)))
        conv_b.append(np.zeros(spec.n_filters))
        in_ch = spec.n_filters
    flat = cfg.flat_features()
    a1 = np.sqrt(3.0 / flat)
    a2 = np.sqrt(3.0 / cfg.dense_units)
    return Params(
        conv_w=conv_w, conv_b=conv_b,
        dense1_w=rng.uniform(-a1, a1, (cfg.dense_units, flat)),
        dense1_b=np.zeros(cfg.dense_units),
        dense2_w=rng.uniform(-a2, a2, (cfg.n_classes, cfg.dense_units)),
        dense2_b=np.zeros(cfg.n_classes),
        seed=None if isinstance(seed, np.random.Generator) else int(seed),
    )


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    argmax: int
    confidence: float


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _maxpool(a: np.ndarray, window: int, stride: int):
    """Floor-mode max pool; returns output plus per-window argmax indices."""
    if window == 1 and stride == 1:
        return a, None
    view = np.lib.stride_tricks.sliding_window_view(a, (window, window),
                                                    axis=(1, 2))
    view = view[:, ::stride, ::stride]
    flat = view.reshape(view.shape[:3] + (window * window,))
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    return out, idx


def _maxpool_backward(dout, idx, in_shape, window, stride):
    if idx is None:
        return dout
    da = np.zeros(in_shape)
    f, so_r, so_c = dout.shape
    rows = (np.arange(so_r) * stride)[None, :, None] + idx // window
    cols = (np.arange(so_c) * stride)[None, None, :] + idx % window
    ff = np.arange(f)[:, None, None]
    if stride >= window:  # windows disjoint, no index collides
        da[ff, rows, cols] = dout
    else:
        np.add.at(da, (ff, rows, cols), dout)
    return da


def _as_input(cfg: NetworkConfig, image) -> np.ndarray:
    if isinstance(image, NormalizedFrame):
        x = image.pixels
    else:
        x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.shape != (1, cfg.input_px, cfg.input_px):
        raise ValueError(
            f"expected ({cfg.input_px}, {cfg.input_px}) input, got {x.shape[1:]}")
    return np.ascontiguousarray(x, dtype=np.float64)


def _forward_cached(params: Params, cfg: NetworkConfig, x: np.ndarray,
                    dropout_mask: np.ndarray | None):
    cache = {"x": [], "z": [], "a": [], "idx": []}
    for w, b in zip(params.conv_w, params.conv_b):
        cache["x"].append(x)
        z = kernels.conv2d(x, w) + b[:, None, None]
        a = np.maximum(z, 0.0)
        x, idx = _maxpool(a, cfg.pool_window, cfg.pool_stride)
        cache["z"].append(z)
        cache["a"].append(a)
        cache["idx"].append(idx)
    flat = x.reshape(-1)
    h = params.dense1_w @ flat + params.dense1_b
    hr = np.maximum(h, 0.0)
    hd = hr * dropout_mask if dropout_mask is not None else hr
    logits = params.dense2_w @ hd + params.dense2_b
    probs = _softmax(logits)
    cache.update(pooled_shape=x.shape, flat=flat, h=h, hd=hd,
                 mask=dropout_mask, probs=probs)
    return probs, cache


def forward(params: Params, cfg: NetworkConfig, image, train_mode: bool = False,
            rng: np.random.Generator | None = None,
            dropout_mask: np.ndarray | None = None) -> Prediction:
    """Run the network on one image. Dropout applies only in train mode."""
    x = _as_input(cfg, image)
    mask = None
    if train_mode and cfg.dropout_rate > 0:
        if dropout_mask is not None:
            mask = dropout_mask
        else:
            if rng is None:
                raise ValueError("train_mode dropout needs an rng or a mask")
            mask = make_dropout_mask(cfg, rng)
    probs, _ = _forward_cached(params, cfg, x, mask)
    am = int(np.argmax(probs))
    return Prediction(probs=probs, argmax=am, confidence=float(probs[am]))


def make_dropout_mask(cfg: NetworkConfig, rng: np.random.Generator) -> np.ndarray:
    # inverted scaling: surviving units are boosted so inference needs none
    keep = rng.random(cfg.dense_units) >= cfg.dropout_rate
    return keep / (1.0 - cfg.dropout_rate)


def loss(pred: Prediction, label: int) -> float:
    """Cross-entropy with a probability floor."""
    if not 0 <= label < pred.probs.shape[0]:
        raise ValueError(f"label {label} out of range")
    return float(-np.log(max(float(pred.probs[label]), PROB_FLOOR)))


def _grad_sample(params: Params, cfg: NetworkConfig, x: np.ndarray, label: int,
                 dropout_mask: np.ndarray | None):
    probs, cache = _forward_cached(params, cfg, x, dropout_mask)
    sample_loss = float(-np.log(max(float(probs[label]), PROB_FLOOR)))
    g = params.zeros_like()

    dlogits = probs.copy()
    dlogits[label] -= 1.0
    g.dense2_w[:] = np.outer(dlogits, cache["hd"])
    g.dense2_b[:] = dlogits
    dhd = params.dense2_w.T @ dlogits
    dhr = dhd * cache["mask"] if cache["mask"] is not None else dhd
    dh = dhr * (cache["h"] > 0)
    g.dense1_w[:] = np.outer(dh, cache["flat"])
    g.dense1_b[:] = dh
    dpool = (params.dense1_w.T @ dh).reshape(cache["pooled_shape"])

    for i in range(len(cfg.conv_layers) - 1, -1, -1):
        da = _maxpool_backward(dpool, cache["idx"][i], cache["a"][i].shape,
                               cfg.pool_window, cfg.pool_stride)
        dz = da * (cache["z"][i] > 0)
        g.conv_b[i][:] = dz.sum(axis=(1, 2))
        g.conv_w[i][:] = kernels.conv2d_dw(cache["x"][i], dz)
        if i > 0:
            k = cfg.conv_layers[i].kernel_px
            dz_pad = np.pad(dz, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            w_sw = np.ascontiguousarray(
                params.conv_w[i][:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dpool = kernels.conv2d(dz_pad, w_sw)
    return sample_loss, g


def backward(params: Params, cfg: NetworkConfig, batch,
             dropout_masks=None) -> tuple[float, Params]:
    """Mean loss and mean gradients over a batch of (image, label) pairs.

    batch is (images, labels); dropout_masks, when given, supplies one
    fixed mask per sample (finite-difference checks rely on that).
    """
    images, labels = batch
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    total = None
    loss_sum = 0.0
    for j in range(n):
        x = _as_input(cfg, images[j])
        mask = dropout_masks[j] if dropout_masks is not None else None
        sample_loss, g = _grad_sample(params, cfg, x, int(labels[j]), mask)
        loss_sum += sample_loss
        if total is None:
            total = g
        else:
            total.add_scaled(g, 1.0)
    for _, arr in total.items():
        arr /= n
    return loss_sum / n, total


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def _check_dataset(name, dataset, cfg):
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError(f"{name} dataset is empty")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{name} images and labels disagree in length")
    if images.shape[1:] != (cfg.input_px, cfg.input_px):
        raise ValueError(
            f"{name} images are {images.shape[1:]}, expected "
            f"({cfg.input_px}, {cfg.input_px})")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"{name} labels outside [0, {cfg.n_classes})")
    return images, labels


def train(cfg: NetworkConfig, tcfg: TrainConfig, train_set,
          val_set) -> tuple[Params, list[dict]]:
    """SGD training; returns the epoch checkpoint with lowest val loss."""
    x_tr, y_tr = _check_dataset("train", train_set, cfg)
    x_va, y_va = _check_dataset("val", val_set, cfg)

    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, rng)
    params.seed = tcfg.seed
    best = params.copy()
    best_val = np.inf
    history = []
    n = x_tr.shape[0]
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n) if tcfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            masks = None
            if cfg.dropout_rate > 0:
                masks = [make_dropout_mask(cfg, rng) for _ in idx]
            batch_loss, grads = backward(params, cfg, (x_tr[idx], y_tr[idx]),
                                         dropout_masks=masks)
            params.add_scaled(grads, -tcfg.learning_rate)
            loss_sum += batch_loss * len(idx)
        report = evaluate(params, cfg, (x_va, y_va))
        history.append({"epoch": epoch, "train_loss": loss_sum / n,
                        "val_loss": report["mean_loss"],
                        "val_accuracy": report["accuracy"]})
        if report["mean_loss"] < best_val:
            best_val = report["mean_loss"]
            best = params.copy()
    return best, history


def evaluate(params: Params, cfg: NetworkConfig, dataset) -> dict:
    """Accuracy, mean loss, and a true-by-predicted confusion matrix."""
    images, labels = _check_dataset("eval", dataset, cfg)
    confusion = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
    loss_sum = 0.0
    for x, y in zip(images, labels):
        pred = forward(params, cfg, x)
        confusion[int(y), pred.argmax] += 1
        loss_sum += loss(pred, int(y))
    total = labels.shape[0]
    return {"accuracy": float(np.trace(confusion)) / total,
            "mean_loss": loss_sum / total,
            "confusion": confusion}


def predict_with_threshold(params: Params, cfg: NetworkConfig, image,
                           target_class: int, theta: float
                           ) -> tuple[bool, Prediction]:
    """Accept iff argmax equals the target class and confidence >= theta."""
    if not 0 <= theta <= 1:
        raise ValueError("theta must lie in [0, 1]")
    pred = forward(params, cfg, image)
    accept = pred.argmax == target_class and pred.confidence >= theta
    return accept, pred


def combine_and(accept_a: bool, accept_b: bool) -> bool:
    """Two-model gate: deflect only when both models accept."""
    return bool(accept_a) and bool(accept_b)


def export_activations(params: Params, cfg: NetworkConfig, image,
                       stage: int) -> list[np.ndarray]:
    """Post-ReLU feature maps (one per filter) at a conv stage, 0-based."""
    if not 0 <= stage < len(cfg.conv_layers):
        raise ValueError(f"stage {stage} outside 0..{len(cfg.conv_layers) - 1}")
    x = _as_input(cfg, image)
    _, cache = _forward_cached(params, cfg, x, None)
    return [cache["a"][stage][f] for f in range(cfg.conv_layers[stage].n_filters)]


def scale_activation(map2d: np.ndarray) -> np.ndarray:
    """Min-max scale a map to 0..255 for PGM export; constant maps go to 0."""
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi <= lo:
        return np.zeros_like(map2d)
    return (map2d - lo) * (255.0 / (hi - lo))


def incremental_retrain(base_train, correction_set, cfg: NetworkConfig,
                        tcfg: TrainConfig, val_set) -> Params:
    """Retrain from scratch on base plus correction images (no fine-tune)."""
    xb, yb = _check_dataset("base", base_train, cfg)
    xc = np.asarray(correction_set[0], dtype=np.float64)
    yc = np.asarray(correction_set[1], dtype=np.int64)
    if xc.shape[0] > 0:
        present = set(np.unique(yc).tolist())
        missing = sorted(set(range(cfg.n_classes)) - present)
        if missing:
            warnings.warn(f"correction set lacks classes {missing}; "
                          "the merged set is imbalanced")
        xb = np.concatenate([xb, xc], axis=0)
        yb = np.concatenate([yb, yc], axis=0)
    params, _ = train(cfg, tcfg, (xb, yb), val_set)
    return params
