"""Encoder-projector networks, parameter snapshots, and binary checkpoints.

Both networks in the method (the unsupervised reference and the supervised
learner) share this architecture: an MLP encoder whose last hidden layer is
the feature space the linear classifier reads, followed by a two-layer
projection head whose output is L2-normalized onto the unit sphere.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .numcore import Tensor, affine, l2_normalize_rows, relu

_CHECKPOINT_MAGIC = b"OSSCLEP1"


def kaiming_uniform(rng, fan_in, fan_out):
    """Weight init U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class EncoderProjector:
    """MLP encoder plus projection head with unit-norm embeddings.

    Args:
        input_dim: flat input dimensionality.
        hidden: encoder layer widths; the last entry is the feature dim.
        proj_hidden: projection head hidden width.
        embed_dim: embedding dimensionality (output of the head).
        rng: numpy Generator used for weight init; required unless params
            are injected afterwards via copy_params_from.
        dtype: parameter dtype, float32 for training, float64 for checking.
    """

    def __init__(self, input_dim, hidden=(64, 64), proj_hidden=32, embed_dim=16,
                 rng=None, dtype=np.float32):
        hidden = tuple(int(h) for h in hidden)
        if input_dim < 1 or proj_hidden < 1 or embed_dim < 1 or not hidden:
            raise ValueError("all layer widths must be positive")
        if any(h < 1 for h in hidden):
            raise ValueError("all layer widths must be positive")
        self.input_dim = int(input_dim)
        self.hidden = hidden
        self.proj_hidden = int(proj_hidden)
        self.embed_dim = int(embed_dim)
        self.dtype = np.dtype(dtype)
        if rng is None:
            rng = np.random.default_rng(0)

        dims = [self.input_dim, *hidden, self.proj_hidden, self.embed_dim]
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = Tensor(kaiming_uniform(rng, fan_in, fan_out).astype(self.dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(fan_out, dtype=self.dtype), requires_grad=True)
            self.params.extend((w, b))
        self._n_encoder_layers = len(hidden)

    @property
    def feature_dim(self):
        return self.hidden[-1]

    def _as_tensor(self, x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def encoder_features(self, x):
        """Forward through the encoder only; relu after every layer."""
        h = self._as_tensor(x)
        for i in range(self._n_encoder_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = relu(affine(h, w, b))
        return h

    def embed(self, x):
        """Forward through encoder and head; rows come back unit-normalized."""
        h = self.encoder_features(x)
        k = 2 * self._n_encoder_layers
        h = relu(affine(h, self.params[k], self.params[k + 1]))
        h = affine(h, self.params[k + 2], self.params[k + 3])
        return l2_normalize_rows(h)

    def snapshot(self):
        """Frozen copy of the current parameters; see ParamSnapshot."""
        return ParamSnapshot(self)

    def copy_params_from(self, other):
        """Overwrite parameters with a bitwise copy of another net or snapshot."""
        arrays = other.param_arrays()
        if len(arrays) != len(self.params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(self.params, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"parameter shape mismatch: {p.data.shape} vs {a.shape}")
            p.data = a.astype(self.dtype, copy=True)

    def param_arrays(self):
        return [p.data for p in self.params]

    def arch_tuple(self):
        return (self.input_dim, self.hidden, self.proj_hidden, self.embed_dim)


class ParamSnapshot:
    """Read-only view of an EncoderProjector's parameters at one instant.

    Used as the frozen teacher for distillation: forward passes share the
    live net's code path (so snapshot.embed equals net.embed bitwise at the
    moment of capture) but the arrays are copies and not writable.
    """

    def __init__(self, net):
        self._net = EncoderProjector(net.input_dim, net.hidden, net.proj_hidden,
                                     net.embed_dim, rng=np.random.default_rng(0),
                                     dtype=net.dtype)
        for p, src in zip(self._net.params, net.params):
            frozen = src.data.copy()
            frozen.flags.writeable = False
            p.data = frozen
            p.requires_grad = False

    def encoder_features(self, x):
        return self._net.encoder_features(x)

    def embed(self, x):
        return self._net.embed(x)

    def param_arrays(self):
        return [p.data for p in self._net.params]

    def digest(self):
        """sha256 over the concatenated parameter bytes, for immutability checks."""
        h = hashlib.sha256()
        for a in self.param_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class LinearClassifier:
    """Linear head over encoder features, one logit per observed class."""

    def __init__(self, feature_dim, n_classes, rng, dtype=np.float32):
        if feature_dim < 1 or n_classes < 1:
            raise ValueError("feature_dim and n_classes must be positive")
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.weight = Tensor(kaiming_uniform(rng, feature_dim, n_classes).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)

    @property
    def params(self):
        return [self.weight, self.bias]

    def classify(self, features):
        """Logits [B, n_classes] from features [B, feature_dim]."""
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.weight.data.dtype))
        return affine(features, self.weight, self.bias)


def save_net(net, path):
    """Write an EncoderProjector to a little-endian binary checkpoint.

    Layout: magic, u32 input_dim, u32 n_hidden, n_hidden x u32 widths,
    u32 proj_hidden, u32 embed_dim, then each parameter's float32 bytes in
    construction order. Shapes are implied by the architecture header.
    """
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", net.input_dim, len(net.hidden)))
        f.write(struct.pack(f"<{len(net.hidden)}I", *net.hidden))
        f.write(struct.pack("<II", net.proj_hidden, net.embed_dim))
        for a in net.param_arrays():
            f.write(np.ascontiguousarray(a, dtype=np.float32).tobytes())


def load_net(path):
    """Read a checkpoint written by save_net; round-trips float32 nets exactly."""
    with open(path, "rb") as f:
        magic = f.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        input_dim, n_hidden = struct.unpack("<II", f.read(8))
        hidden = struct.unpack(f"<{n_hidden}I", f.read(4 * n_hidden))
        proj_hidden, embed_dim = struct.unpack("<II", f.read(8))
        net = EncoderProjector(input_dim, hidden, proj_hidden, embed_dim,
                               rng=np.random.default_rng(0))
        for p in net.params:
            raw = f.read(4 * p.data.size)
            if len(raw) != 4 * p.data.size:
                raise ValueError("checkpoint truncated")
            p.data = np.frombuffer(raw, dtype=np.float32).reshape(p.data.shape).copy()
        tail = f.read(1)
        if tail:
            raise ValueError("trailing bytes after checkpoint payload")
    return net
