"""Builders for the attribution network, the reliability head and their composite.

Layer naming follows the architecture listing: ``conv1``..``conv4``,
``ip1``/``ip2`` for the attribution part and ``ip3``, ``ip4``, ... for the
reliability head.  Every layer carries a ``part`` tag (``"mc"`` or ``"md"``)
used by the freeze masks.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import (DTYPE, Conv2D, Flatten, InnerProduct, MaxPool2x2, Network, ReLU, Softmax, make_rng)

PATCH_SHAPE = (64, 64, 3)
HIDDEN_WIDTHS = (32, 64, 128)
MC_CONVS = [(4, 4, 3, 32), (5, 5, 32, 48), (5, 5, 48, 64), (5, 5, 64, 128)]
SELECTED_MD_WIDTHS = {
    2: (128, 2),
    3: (64, 128, 2),
    4: (64, 32, 128, 2),
    5: (64, 32, 64, 128, 2),
    6: (64, 32, 32, 64, 64, 2),
}
FREEZE_KINDS = ("all_mc", "conv_only", "none")
# uniform init limit is sqrt(gain / fan_in): He for layers feeding a ReLU, LeCun otherwise
RELU_GAIN = 6.0
LINEAR_GAIN = 3.0

MAGIC = b"CAMREL\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def mc_parameter_count(num_camera_models: int) -> int:
    """Closed-form parameter count of the attribution network."""
    convs = sum(kh * kw * c * f + f for kh, kw, c, f in MC_CONVS)
    return convs + (128 * 128 + 128) + (128 * num_camera_models + num_camera_models)


def md_parameter_count(widths, n_in: int) -> int:
    total, prev = 0, n_in
    for w in widths:
        total += prev * w + w
        prev = w
    return total


def build_mc(num_camera_models: int, seed: int = 0) -> Network:
    """Attribution network: 4 convolutions (pooling after the first three), ip1 + ReLU, ip2.

    The output is |L| raw logits; there is no final activation.
    """
    if num_camera_models < 2:
        raise ValueError("need at least 2 camera models")
    rng = make_rng(seed, 1)
    layers = []
    for i, (kh, kw, c, f) in enumerate(MC_CONVS, start=1):
        layers.append(Conv2D.init(kh, kw, c, f, rng, gain=LINEAR_GAIN, name=f"conv{i}", part="mc"))
        if i < 4:
            layers.append(MaxPool2x2(name=f"pool{i}", part="mc"))
    layers += [
        Flatten(name="flatten", part="mc"),
        InnerProduct.init(128, 128, rng, gain=RELU_GAIN, name="ip1", part="mc"),
        ReLU(name="relu_ip1", part="mc"),
        InnerProduct.init(128, num_camera_models, rng, gain=LINEAR_GAIN, name="ip2", part="mc"),
    ]
    return Network(layers, name="Mc", input_shape=PATCH_SHAPE, meta={"num_camera_models": num_camera_models})


def validate_md_widths(widths) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if not 1 <= len(widths) <= 6:
        raise ValueError(f"reliability head needs 1 to 6 layers, got {len(widths)}")
    if widths[-1] != 2:
        raise ValueError(f"last layer must have 2 neurons, got {widths[-1]}")
    bad = [w for w in widths[:-1] if w not in HIDDEN_WIDTHS]
    if bad:
        raise ValueError(f"hidden widths must be in {HIDDEN_WIDTHS}, got {bad}")
    return widths


def build_md(widths, num_inputs: int = 18, seed: int = 0) -> Network:
    """Reliability head: inner-product layers with ReLU, the last one followed by softmax."""
    widths = validate_md_widths(widths)
    rng = make_rng(seed, 2)
    layers, prev = [], num_inputs
    for i, w in enumerate(widths):
        gain = RELU_GAIN if i < len(widths) - 1 else LINEAR_GAIN
        layers.append(InnerProduct.init(prev, w, rng, gain=gain, name=f"ip{3 + i}", part="md"))
        if i < len(widths) - 1:
            layers.append(ReLU(name=f"relu_ip{3 + i}", part="md"))
        prev = w
    layers.append(Softmax(name="softmax", part="md"))
    return Network(layers, name=f"Md{len(widths)}", input_shape=(num_inputs,), meta={"widths": list(widths)})


def compose_mf(mc: Network, md: Network) -> Network:
    """Composite network: attribution logits -> ReLU -> reliability head.

    Layers are shared with ``mc`` and ``md`` (not copied).
    """
    n_out = mc.shape_chain()[-1][0]
    n_in = md.input_shape[0] if md.input_shape else md.param_layers()[0].params["weights"].shape[0]
    if n_out != n_in:
        raise ValueError(f"attribution output width {n_out} != reliability head input width {n_in}")
    layers = list(mc.layers) + [ReLU(name="relu_link", part="link")] + list(md.layers)
    meta = {**mc.meta, **md.meta}
    return Network(layers, name="Mf", input_shape=mc.input_shape, meta=meta)


def split_mf(mf: Network) -> tuple[Network, Network]:
    """Views of the attribution part and the reliability head of a composite (shared layers)."""
    mc_layers = [layer for layer in mf.layers if layer.part == "mc"]
    md_layers = [layer for layer in mf.layers if layer.part == "md"]
    mc = Network(mc_layers, name="Mc", input_shape=mf.input_shape,
                 meta={"num_camera_models": mc_layers[-1].params["weights"].shape[1]})
    md = Network(md_layers, name=f"Md{sum(layer.has_params for layer in md_layers)}",
                 input_shape=(md_layers[0].params["weights"].shape[0],))
    return mc, md


def apply_freeze(network: Network, mask_kind: str) -> list[bool]:
    """Set freeze flags on a composite; returns the mask over parameterized layers.

    ``all_mc`` freezes the whole attribution part, ``conv_only`` its four
    convolutions, ``none`` leaves everything trainable.
    """
    if mask_kind not in FREEZE_KINDS:
        raise ValueError(f"unknown freeze mask {mask_kind!r}; expected one of {FREEZE_KINDS}")
    for layer in network.param_layers():
        if mask_kind == "all_mc":
            layer.frozen = layer.part == "mc"
        elif mask_kind == "conv_only":
            layer.frozen = layer.part == "mc" and layer.kind == "conv2d"
        else:
            layer.frozen = False
    return [layer.frozen for layer in network.param_layers()]


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   magic (8 bytes) | version u32 | header length u32 | header JSON (utf-8)
#   | raw float32 tensors in layer order | crc32 u32 of everything before it


def save_checkpoint(network: Network, metadata: dict | None, path) -> Path:
    path = Path(path)
    header = {"network": network.describe(), "metadata": metadata or {},
              "tensors": [[layer.name, k, list(v.shape)] for layer in network.param_layers()
                          for k, v in layer.params.items()]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for layer in network.param_layers():
        for v in layer.params.values():
            body += np.ascontiguousarray(v, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[Network, dict]:
    """Load a checkpoint; returns ``(network, metadata)``."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    off = len(MAGIC) + 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    off += hlen
    net = Network.from_description(header["network"])
    expected = [[layer.name, k, list(v.shape)] for layer in net.param_layers() for k, v in layer.params.items()]
    if expected != header["tensors"]:
        raise CheckpointError(f"{path}: tensor table does not match the embedded network spec")
    for layer in net.param_layers():
        for k, v in layer.params.items():
            nbytes = v.size * 4
            if off + nbytes > len(raw) - 4:
                raise CheckpointError(f"{path}: tensor data for {layer.name}.{k} is truncated")
            layer.params[k] = np.frombuffer(raw, dtype="<f4", count=v.size, offset=off).astype(DTYPE).reshape(v.shape)
            off += nbytes
        layer.zero_grad()
    if off != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - off} unexpected trailing bytes")
    return net, header["metadata"]
