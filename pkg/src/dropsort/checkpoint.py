"""Versioned binary model checkpoints.

Layout: one ASCII header line "DSORTCNN <version>", then key=value lines
describing the network configuration, a blank line, then the parameter
arrays as little-endian float32 blocks concatenated in canonical layer
order. A text sidecar (<path>.shapes) lists the layer shapes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cnn import ConvSpec, NetworkConfig, Params, init_params

MAGIC = b"DSORTCNN"
VERSION = 1


def _header(cfg: NetworkConfig, seed) -> bytes:
    lines = [f"{MAGIC.decode()} {VERSION}",
             f"input_px={cfg.input_px}",
             "conv_kernels=" + ",".join(str(s.kernel_px) for s in cfg.conv_layers),
             "conv_filters=" + ",".join(str(s.n_filters) for s in cfg.conv_layers),
             f"pool_window={cfg.pool_window}",
             f"pool_stride={cfg.pool_stride}",
             f"dense_units={cfg.dense_units}",
             f"dropout_rate={cfg.dropout_rate!r}",
             f"n_classes={cfg.n_classes}"]
    if seed is not None:
        lines.append(f"seed={seed}")
    return ("\n".join(lines) + "\n\n").encode("ascii")


def save_checkpoint(path, params: Params, cfg: NetworkConfig) -> None:
    blocks = [np.ascontiguousarray(arr, dtype="<f4").tobytes()
              for _, arr in params.items()]
    path = Path(path)
    path.write_bytes(_header(cfg, params.seed) + b"".join(blocks))
    shape_lines = [f"{name} " + " ".join(str(d) for d in arr.shape)
                   for name, arr in params.items()]
    Path(str(path) + ".shapes").write_text("\n".join(shape_lines) + "\n",
                                           encoding="ascii")


def _parse_header(blob: bytes, path) -> tuple[dict, int]:
    end = blob.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: truncated checkpoint header")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC.decode():
        raise ValueError(f"{path} is not a model checkpoint")
    if int(first[1]) != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {first[1]}")
    kv = {}
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        if not _ or key in kv:
            raise ValueError(f"{path}: bad header line {ln!r}")
        kv[key] = value
    return kv, end + 2


_KNOWN_KEYS = {"input_px", "conv_kernels", "conv_filters", "pool_window",
               "pool_stride", "dense_units", "dropout_rate", "n_classes",
               "seed"}


def load_checkpoint(path) -> tuple[Params, NetworkConfig]:
    path = Path(path)
    blob = path.read_bytes()
    kv, offset = _parse_header(blob, path)
    unknown = set(kv) - _KNOWN_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown header keys {sorted(unknown)}")
    try:
        kernels = [int(s) for s in kv["conv_kernels"].split(",")]
        filters = [int(s) for s in kv["conv_filters"].split(",")]
        if len(kernels) != len(filters):
            raise ValueError("conv_kernels and conv_filters disagree")
        cfg = NetworkConfig(
            input_px=int(kv["input_px"]),
            conv_layers=tuple(ConvSpec(k, f) for k, f in zip(kernels, filters)),
            pool_window=int(kv["pool_window"]),
            pool_stride=int(kv["pool_stride"]),
            dense_units=int(kv["dense_units"]),
            dropout_rate=float(kv["dropout_rate"]),
            n_classes=int(kv["n_classes"]))
    except KeyError as exc:
        raise ValueError(f"{path}: header missing {exc}") from exc

    params = init_params(cfg, 0)  # shapes only; every value is overwritten
    params.seed = int(kv["seed"]) if "seed" in kv else None
    for name, arr in params.items():
        nbytes = arr.size * 4
        block = blob[offset:offset + nbytes]
        if len(block) != nbytes:
            raise ValueError(f"{path}: truncated at block {name}")
        arr[:] = np.frombuffer(block, dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return params, cfg
