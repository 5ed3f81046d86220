"""Coarse generator G, fine-scale network H, discriminator D, checkpoints.

All networks consume and emit values in [-1, 1] (``to_net``/``from_net``
convert from and to the [0, 1] image convention). Architectures are scale
parameterized through ``NetworkSpec`` so the full-size and desk-size
instances share one code path.

Checkpoint byte layout (all integers little-endian)::

    offset 0   4 bytes   magic b"DMFC"
    offset 4   u32       format version (1)
    offset 8   u32       header length L
    offset 12  L bytes   UTF-8 JSON header:
                         {"kind", "spec", "step", "payload_crc32", "payload_bytes",
                          "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    offset 12+L          payload: float32 little-endian tensors, in header order,
                         ``offset`` relative to the payload start
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (CheckpointCorruptError, CheckpointKindError, CheckpointNameError, CheckpointSpecError,
                     CheckpointVersionError, ContractError)
from .tensor import BatchNormStats, Tensor

MAGIC = b"DMFC"
FORMAT_VERSION = 1
COARSE_KINDS = ("Gp", "G")
FINE_KINDS = ("Hp", "H")
DISC_KINDS = ("D",)


@dataclass(frozen=True)
class NetworkSpec:
    n_res_blocks: int = 16
    n_features: int = 64
    fine_layers: int = 20
    disc_layers: int = 4
    value_range: str = "[-1,1]"

    @classmethod
    def paper(cls) -> "NetworkSpec":
        return cls(16, 64, 20, 4)

    @classmethod
    def desk(cls) -> "NetworkSpec":
        return cls(4, 16, 8, 4)

    def validate(self) -> "NetworkSpec":
        if self.n_res_blocks < 1:
            raise ContractError(f"n_res_blocks must be >= 1, got {self.n_res_blocks}")
        if self.n_features < 4:
            raise ContractError(f"n_features must be >= 4, got {self.n_features}")
        if self.fine_layers < 4 or self.fine_layers % 2:
            raise ContractError(f"fine_layers must be even and >= 4, got {self.fine_layers}")
        if self.disc_layers < 1:
            raise ContractError(f"disc_layers must be >= 1, got {self.disc_layers}")
        if self.value_range != "[-1,1]":
            raise ContractError(f"unsupported value_range {self.value_range!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def to_net(img: np.ndarray) -> np.ndarray:
    """HxWx3 (or BxHxWx3) image in [0,1] -> BCHW float32 in [-1,1]."""
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2) * 2.0 - 1.0)


def from_net(x: np.ndarray) -> np.ndarray:
    """BCHW in [-1,1] -> BxHxWx3 in [0,1] (clipped)."""
    return np.clip((np.asarray(x).transpose(0, 2, 3, 1) + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


class Network:
    """Ordered named parameters plus batch-norm running statistics."""

    kind = "?"
    kinds: tuple = ()
    init_scale = 1.0   # multiplies the He-uniform bound of every conv

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec.validate()
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormStats]" = OrderedDict()
        self._rng = np.random.default_rng(seed)
        self.step = 0

    # -- construction helpers
    def _add_conv(self, name: str, cin: int, cout: int, k: int):
        bound = self.init_scale * np.sqrt(6.0 / (cin * k * k))
        w = self._rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def _add_bn(self, name: str, c: int, gamma: float = 1.0):
        self.params[f"{name}.gamma"] = Tensor(np.full(c, gamma), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta")
        self.bn[name] = BatchNormStats.zeros(c)

    def _conv(self, P, x, name, stride=1, pad=None):
        w = P[f"{name}.w"]
        pad = w.shape[2] // 2 if pad is None else pad
        return T.conv2d(x, w, P[f"{name}.b"], stride=stride, pad=pad)

    def _norm(self, P, x, name, train):
        return T.batch_norm(x, P[f"{name}.gamma"], P[f"{name}.beta"], "train" if train else "infer", self.bn[name])

    # -- public surface
    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((n, p.data) for n, p in self.params.items())
        for n, s in self.bn.items():
            out[f"{n}.running_mean"] = s.running_mean
            out[f"{n}.running_var"] = s.running_var
        return out

    def load_arrays(self, arrays: dict):
        expected = list(self.state_arrays())
        if sorted(expected) != sorted(arrays):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise CheckpointNameError(f"tensor names do not match: missing {missing[:5]}, unexpected {extra[:5]}")
        for n, p in self.params.items():
            if arrays[n].shape != p.shape:
                raise CheckpointNameError(f"tensor {n!r} has shape {arrays[n].shape}, expected {p.shape}")
            p.data = np.array(arrays[n], dtype=np.float32)
        for n, s in self.bn.items():
            s.running_mean = np.array(arrays[f"{n}.running_mean"], dtype=np.float32)
            s.running_var = np.array(arrays[f"{n}.running_var"], dtype=np.float32)

    def copy(self) -> "Network":
        other = type(self)(self.spec)
        other.load_arrays(self.state_arrays())
        other.kind = self.kind
        other.step = self.step
        return other

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag


class CoarseGenerator(Network):
    """Head conv, stacked residual blocks, long feature skip, tail conv, tanh.

    Initialization: conv bounds 1/sqrt(fan_in) and a zero scale on each
    block's second batch norm and on the post-block norm, so the residual
    stack starts as the identity, contributes nothing to the long skip, and
    the head-to-tail path carries the signal from step one.
    """

    kind = "Gp"
    kinds = COARSE_KINDS
    init_scale = 1.0 / np.sqrt(6.0)

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__(spec, seed)
        F = spec.n_features
        self._add_conv("head", 3, F, 3)
        for i in range(spec.n_res_blocks):
            self._add_conv(f"block{i}.conv1", F, F, 3)
            self._add_bn(f"block{i}.bn1", F)
            self._add_conv(f"block{i}.conv2", F, F, 3)
            self._add_bn(f"block{i}.bn2", F, gamma=0.0)
        self._add_conv("post.conv", F, F, 3)
        self._add_bn("post.bn", F, gamma=0.0)
        self._add_conv("tail", F, 3, 3)

    def forward(self, x: Tensor, train: bool = False, params: Optional[dict] = None) -> Tensor:
        P = self.params if params is None else params
        head = T.relu(self._conv(P, x, "head"))
        h = head
        for i in range(self.spec.n_res_blocks):
            r = T.relu(self._norm(P, self._conv(P, h, f"block{i}.conv1"), f"block{i}.bn1", train))
            r = self._norm(P, self._conv(P, r, f"block{i}.conv2"), f"block{i}.bn2", train)
            h = T.add(h, r)
        h = self._norm(P, self._conv(P, h, "post.conv"), "post.bn", train)
        h = T.add(h, head)
        return T.tanh_act(self._conv(P, h, "tail"))


class FineNetwork(Network):
    """Residual-learning stage on the upsampled coarse result, then a retrieval
    stage that fuses it with the full-resolution input.

    With at least 6 features a fresh network starts close to returning the
    upsampled coarse result (see ``_init_passthrough``)."""

    kind = "Hp"
    kinds = FINE_KINDS

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__(spec, seed)
        F, L = spec.n_features, spec.fine_layers
        for i in range(L):
            k = 5 if i < L // 2 else 3
            self._add_conv(f"res{i}", 3 if i == 0 else F, F, k)
        self._add_conv("res_proj", F, 3, 3)
        self._add_conv("fuse1", 6, F, 3)
        self._add_conv("fuse2", F, 3, 3)
        if F >= 6:
            self._init_passthrough()

    def _init_passthrough(self, rest: float = 0.1):
        """Start near out = up: zero residual projection, and a retrieval
        stage whose first six channels carry relu(s) and relu(-s) of the
        stage-1 result s, recombined as s by the second conv. The remaining
        channels keep a random init damped by ``rest``."""
        self.params["res_proj.w"].data[:] = 0
        w1, w2 = self.params["fuse1.w"].data, self.params["fuse2.w"].data
        w1[:6] = 0
        w1[6:] *= rest
        w2[:, :6] = 0
        w2[:, 6:] *= rest
        for c in range(3):
            w1[c, c, 1, 1], w1[3 + c, c, 1, 1] = 1, -1
            w2[c, c, 1, 1], w2[c, 3 + c, 1, 1] = 1, -1

    def forward_stages(self, up: Tensor, orig: Tensor, train: bool = False, params: Optional[dict] = None):
        if up.shape != orig.shape:
            raise ContractError(f"fine network inputs must match: upsampled {up.shape} vs original {orig.shape}")
        P = self.params if params is None else params
        h = up
        for i in range(self.spec.fine_layers):
            h = T.relu(self._conv(P, h, f"res{i}"))
        stage1 = T.add(up, self._conv(P, h, "res_proj"))
        h = T.relu(self._conv(P, T.concat_channels(stage1, orig), "fuse1"))
        out = T.clamp(self._conv(P, h, "fuse2"), -1.0, 1.0)
        return stage1, out

    def forward(self, up: Tensor, orig: Tensor, train: bool = False, params: Optional[dict] = None) -> Tensor:
        return self.forward_stages(up, orig, train, params)[1]


class Discriminator(Network):
    """Strided conv stack, global average pool, linear logit, sigmoid."""

    kind = "D"
    kinds = DISC_KINDS

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__(spec, seed)
        cin = 3
        base = max(spec.n_features // 2, 1)
        for i in range(spec.disc_layers):
            cout = base * 2 ** i
            self._add_conv(f"d{i}", cin, cout, 3)
            if i > 0:
                self._add_bn(f"d{i}.bn", cout)
            cin = cout
        bound = np.sqrt(6.0 / cin)
        self.params["fc.w"] = Tensor(self._rng.uniform(-bound, bound, size=(1, cin)), requires_grad=True, name="fc.w")
        self.params["fc.b"] = Tensor(np.zeros(1), requires_grad=True, name="fc.b")

    def forward(self, x: Tensor, train: bool = False, params: Optional[dict] = None) -> Tensor:
        need = 2 ** self.spec.disc_layers
        if x.ndim != 4 or min(x.shape[2:]) < need:
            raise ContractError(f"discriminator input {x.shape} smaller than 2^disc_layers = {need}")
        P = self.params if params is None else params
        h = x
        for i in range(self.spec.disc_layers):
            h = self._conv(P, h, f"d{i}", stride=2, pad=1)
            if i > 0:
                h = self._norm(P, h, f"d{i}.bn", train)
            h = T.leaky_relu(h, 0.2)
        logit = T.linear(T.global_avg_pool(h), P["fc.w"], P["fc.b"])
        return T.sigmoid(logit)


def build_coarse_generator(spec: NetworkSpec, seed: int = 0) -> CoarseGenerator:
    return CoarseGenerator(spec, seed)


def build_fine_network(spec: NetworkSpec, seed: int = 0) -> FineNetwork:
    return FineNetwork(spec, seed)


def build_discriminator(spec: NetworkSpec, seed: int = 0) -> Discriminator:
    return Discriminator(spec, seed)


_CLASSES = {"Gp": CoarseGenerator, "G": CoarseGenerator, "Hp": FineNetwork, "H": FineNetwork, "D": Discriminator}


def infer_coarse(g: CoarseGenerator, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return g.forward(Tensor(x), train=False).data


def infer_fine(h: FineNetwork, up: np.ndarray, orig: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return h.forward(Tensor(up), Tensor(orig), train=False).data


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(net: Network, step: Optional[int] = None) -> bytes:
    arrays = net.state_arrays()
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "kind": net.kind,
        "spec": net.spec.to_dict(),
        "step": int(net.step if step is None else step),
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(blob: bytes, kind=None, spec: Optional[NetworkSpec] = None) -> Network:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < 12 + hlen:
        raise CheckpointCorruptError("checkpoint truncated inside header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from None
    payload = blob[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointCorruptError(f"checkpoint payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointCorruptError("checkpoint payload checksum mismatch")

    ck_kind = header["kind"]
    if kind is not None:
        allowed = (kind,) if isinstance(kind, str) else tuple(kind)
        if ck_kind not in allowed:
            raise CheckpointKindError(f"checkpoint holds a {ck_kind!r} network, expected one of {allowed}")
    if ck_kind not in _CLASSES:
        raise CheckpointKindError(f"unknown network kind {ck_kind!r}")
    ck_spec = NetworkSpec.from_dict(header["spec"])
    if spec is not None and spec != ck_spec:
        raise CheckpointSpecError(f"checkpoint spec {ck_spec} does not match requested {spec}")

    arrays = OrderedDict()
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    net = _CLASSES[ck_kind](ck_spec)
    net.load_arrays(arrays)
    net.kind = ck_kind
    net.step = header["step"]
    return net


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(net: Network, path, step: Optional[int] = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(net, step))


def load_checkpoint(path, kind=None, spec: Optional[NetworkSpec] = None) -> Network:
    """Read a checkpoint; ``kind`` (str or tuple) and ``spec`` are enforced when given."""
    blob = Path(path).read_bytes()
    return decode_checkpoint(blob, kind, spec)
