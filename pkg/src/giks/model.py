"""Varying-coefficient dose-response network.

``mu(x, t) = head(encoder(x), t)`` where the encoder is a ReLU MLP and each
head layer's weights are a truncated-power spline in ``t``. The head also
returns the analytic derivative of its output with respect to ``t``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffnet as dn
from .errors import DimensionError, DomainError, IntegrityError

_PREDICT_CHUNK = 20000


@dataclass(frozen=True)
class SplineBasis:
    """Truncated power basis ``[1, t, .., t^p, (t-k1)_+^p, ...]``."""

    degree: int = 2
    knots: tuple = (1 / 3, 2 / 3)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if any(not 0 < k < 1 for k in knots):
            raise ValueError("knots must lie in the open interval (0, 1)")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError("knots must be strictly increasing")

    @property
    def dim(self):
        return self.degree + 1 + len(self.knots)


def _check_unit(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("treatments must lie in [0, 1]")
    return t


def spline_eval(basis: SplineBasis, t):
    """Basis values; scalar ``t`` gives a vector, array ``t`` gives one row per entry."""
    t = _check_unit(t)
    tt = np.atleast_1d(t)[:, None]
    powers = tt ** np.arange(basis.degree + 1)
    trunc = np.maximum(tt - np.asarray(basis.knots)[None, :], 0.0) ** basis.degree
    out = np.concatenate([powers, trunc], axis=1)
    return out[0] if t.ndim == 0 else out


def spline_deriv(basis: SplineBasis, t):
    """Elementwise d/dt of :func:`spline_eval`."""
    t = _check_unit(t)
    tt = np.atleast_1d(t)[:, None]
    p = basis.degree
    ks = np.arange(p + 1)
    powers = np.zeros((tt.shape[0], p + 1))
    powers[:, 1:] = ks[1:] * tt ** (ks[1:] - 1)
    trunc = p * np.maximum(tt - np.asarray(basis.knots)[None, :], 0.0) ** (p - 1)
    out = np.concatenate([powers, trunc], axis=1)
    return out[0] if t.ndim == 0 else out


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (50, 50)
    embed_dim: int = 50

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all encoder dimensions must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    head_hidden: tuple = (50,)
    degree: int = 2
    knots: tuple = (1 / 3, 2 / 3)

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))

    @property
    def basis(self):
        return SplineBasis(self.degree, self.knots)

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["hidden_dims"] = list(self.encoder.hidden_dims)
        d["head_hidden"] = list(self.head_hidden)
        d["knots"] = list(self.knots)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(encoder=EncoderConfig(**d["encoder"]), head_hidden=tuple(d["head_hidden"]),
                   degree=d["degree"], knots=tuple(d["knots"]))


def _uniform_block(name, rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return dn.ParamBlock(name, rng.uniform(-bound, bound, size=shape))


class Encoder:
    """ReLU MLP ``input_dim -> hidden_dims... -> embed_dim``; ReLU after every layer."""

    def __init__(self, config: EncoderConfig, rng):
        self.config = config
        dims = [config.input_dim, *config.hidden_dims, config.embed_dim]
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            W = _uniform_block(f"enc{i}.W", rng, (a, b), a)
            bias = _uniform_block(f"enc{i}.b", rng, (1, b), a)
            self.layers.append((W, bias))

    def params(self):
        return [p for layer in self.layers for p in layer]

    def forward(self, X) -> dn.Node:
        h = dn.const(X)
        for W, b in self.layers:
            h = dn.relu(dn.affine(h, W, b))
        return h


class VcHead:
    """Varying-coefficient head: layers ``embed -> head_hidden... -> 1``.

    Any head offering ``forward(z_node, t)`` and ``value_and_dt(z, t)`` can be
    plugged into :class:`ModelState`.
    """

    def __init__(self, in_dim, hidden, basis: SplineBasis, rng):
        self.basis = basis
        dims = [in_dim, *hidden, 1]
        self.layer_shapes = list(zip(dims[:-1], dims[1:]))
        self.banks = [
            _uniform_block(f"head{i}.bank", rng, ((a + 1) * basis.dim, b), a)
            for i, (a, b) in enumerate(self.layer_shapes)
        ]

    def params(self):
        return list(self.banks)

    def forward(self, z: dn.Node, t) -> dn.Node:
        B = spline_eval(self.basis, np.atleast_1d(t))
        h = z
        last = len(self.banks) - 1
        for i, bank in enumerate(self.banks):
            h = dn.spline_contract(h, B, bank)
            if i < last:
                h = dn.relu(h)
        return dn.column(h, 0)

    def value_and_dt(self, z, t):
        """Forward-mode pass returning output and its t-derivative per row."""
        t = np.atleast_1d(t)
        B = spline_eval(self.basis, t)
        dB = spline_deriv(self.basis, t)
        n = z.shape[0]
        h, dh = z, np.zeros_like(z)
        last = len(self.banks) - 1
        for i, bank in enumerate(self.banks):
            haug = np.concatenate([h, np.ones((n, 1))], axis=1)
            dhaug = np.concatenate([dh, np.zeros((n, 1))], axis=1)
            # layer weights and their t-derivative, per row; bank rows are indexed j * dim + k
            a = (haug[:, :, None] * B[:, None, :]).reshape(n, -1) @ bank.value
            da = ((haug[:, :, None] * dB[:, None, :] + dhaug[:, :, None] * B[:, None, :]).reshape(n, -1)
                  @ bank.value)
            if i < last:
                mask = a > 0
                h, dh = np.where(mask, a, 0.0), np.where(mask, da, 0.0)
            else:
                h, dh = a, da
        return h[:, 0], dh[:, 0]


class ModelState:
    """Encoder + head, plus a fixed output affine map (training standardization).

    ``predict`` returns ``y_mean + y_std * net(x, t)``; the training losses work
    directly on ``net`` against standardized targets.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rng_seed = int(seed)
        self.basis = config.basis
        rng = np.random.default_rng(self.rng_seed)
        self.encoder = Encoder(config.encoder, rng)
        self.head = VcHead(config.encoder.embed_dim, config.head_hidden, self.basis, rng)
        self.y_mean = 0.0
        self.y_std = 1.0
        self.info = {}

    @classmethod
    def create(cls, input_dim, hidden_dims=(50, 50), embed_dim=50, head_hidden=(50,),
               degree=2, knots=(1 / 3, 2 / 3), seed=0):
        enc = EncoderConfig(input_dim, tuple(hidden_dims), embed_dim)
        return cls(ModelConfig(enc, tuple(head_hidden), degree, tuple(knots)), seed)

    # -- parameters --------------------------------------------------------

    def params(self):
        return self.encoder.params() + self.head.params()

    def n_params(self):
        return sum(p.size for p in self.params())

    def snapshot(self):
        return [p.value.copy() for p in self.params()]

    def restore(self, values):
        for p, v in zip(self.params(), values):
            p.value[...] = v

    # -- recorded forward ---------------------------------------------------

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.config.encoder.input_dim:
            raise DimensionError(
                f"expected covariates with {self.config.encoder.input_dim} columns, got shape {X.shape}")
        return X

    def encode_node(self, X) -> dn.Node:
        return self.encoder.forward(self._check_X(X))

    def net_node(self, z: dn.Node, t) -> dn.Node:
        t = _check_unit(t)
        if np.size(t) != z.shape[0]:
            raise DimensionError("need one treatment per covariate row")
        return self.head.forward(z, t)

    # -- numeric API ----------------------------------------------------------

    def encode(self, X):
        return self.encode_node(X).value

    def net(self, X, t):
        """Standardized-scale output and its t-derivative."""
        X = self._check_X(X)
        t = np.atleast_1d(_check_unit(t))
        if t.shape[0] != X.shape[0]:
            raise DimensionError("need one treatment per covariate row")
        ys, dys = [], []
        for s in range(0, X.shape[0], _PREDICT_CHUNK):
            z = self.encoder.forward(X[s:s + _PREDICT_CHUNK]).value
            y, dy = self.head.value_and_dt(z, t[s:s + _PREDICT_CHUNK])
            ys.append(y)
            dys.append(dy)
        if not ys:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(ys), np.concatenate(dys)

    def predict(self, X, t):
        return self.y_mean + self.y_std * self.net(X, t)[0]

    def predict_dt(self, X, t):
        return self.y_std * self.net(X, t)[1]

    # -- checkpoint ------------------------------------------------------------

    def to_dict(self):
        return {
            "format": "giks-model/1",
            "config": self.config.to_dict(),
            "basis": {"degree": self.basis.degree, "knots": list(self.basis.knots)},
            "seed": self.rng_seed,
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "info": self.info,
            "params": {p.name: {"shape": list(p.shape), "data": p.value.ravel().tolist()}
                       for p in self.params()},
        }

    @classmethod
    def from_dict(cls, d):
        try:
            model = cls(ModelConfig.from_dict(d["config"]), d["seed"])
            model.y_mean = float(d["y_mean"])
            model.y_std = float(d["y_std"])
            model.info = d.get("info", {})
            blocks = d["params"]
            for p in model.params():
                rec = blocks[p.name]
                arr = np.asarray(rec["data"], dtype=np.float64)
                if tuple(rec["shape"]) != p.shape or arr.size != p.size:
                    raise IntegrityError(f"block {p.name} has wrong shape")
                p.value[...] = arr.reshape(p.shape)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, IntegrityError):
                raise
            raise IntegrityError(f"corrupt checkpoint: {exc!r}") from exc
        if set(blocks) != {p.name for p in model.params()}:
            raise IntegrityError("checkpoint parameter set does not match config")
        return model

    def save(self, path):
        # json writes floats with repr, which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_dict(d)


def encode(model: ModelState, X):
    return model.encode(X)


def predict(model: ModelState, X, t):
    return model.predict(X, t)


def predict_dt(model: ModelState, X, t):
    return model.predict_dt(X, t)
