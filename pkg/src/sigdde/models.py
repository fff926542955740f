"""Encoder-decoder models for trajectory extrapolation.

An encoder maps the observed part of a trajectory to a latent initial state;
a decoder maps that state and a set of query times to predicted states.

Encoders
    ``signature``  sliding-window lift, truncated signature, linear projection
    ``gru``        stacked GRU over ``(x(t_i), t_i)`` with a linear head
    ``point``      the first or last observed value

Decoders
    ``node``   forward-Euler integration of an MLP vector field
    ``anode``  the same on a state padded with zero-initialized dimensions
    ``flow``   stacked residual flows ``z + tanh(alpha * t) * g(t, z)`` with
               contractive ``g``, followed by a readout MLP

Every affine map is stored as one ``(fan_in + 1, fan_out)`` matrix whose last
row is the bias, and applied to the input with an appended ones column.
Parameters live in a flat ``{name: array}`` dict; the forward functions take
the same dict with values wrapped as tensors (tape variables when training).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signature import sig_dimension, signature

CHECKPOINT_VERSION = 1
SPECTRAL_TARGET = 0.99


@dataclass
class EncoderConfig:
    kind: str = "signature"
    latent_dim: int = 2
    window: int = 40
    depth: int = 3
    learned_features: int = 4
    phi_hidden: int = 25
    include_original: bool = True
    include_time: bool = True
    gru_layers: int = 2
    gru_hidden: int = 21
    variational: bool = False
    point_mode: str = "last"

    def __post_init__(self):
        if self.kind not in ("signature", "gru", "point"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "signature":
            if self.depth < 1:
                raise ValueError(f"signature depth must be >= 1, got {self.depth}")
            if self.window < 1:
                raise ValueError(f"window must be >= 1, got {self.window}")
        if self.point_mode not in ("first", "last"):
            raise ValueError(f"point_mode must be 'first' or 'last', got {self.point_mode!r}")

    def path_channels(self, data_dim: int) -> int:
        return self.learned_features + data_dim * self.include_original + self.include_time


@dataclass
class DecoderConfig:
    kind: str = "flow"
    hidden: int | None = None      # 136 for node/anode, 26 for flow
    layers: int | None = None      # MLP layers for node/anode, flow blocks for flow
    augment_dims: int = 1
    solver_step: float | None = None

    def __post_init__(self):
        if self.kind not in ("node", "anode", "flow"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.hidden is None:
            self.hidden = 26 if self.kind == "flow" else 136
        if self.layers is None:
            self.layers = 2 if self.kind == "flow" else 3
        if self.kind == "node":
            self.augment_dims = 0


# -- building blocks -----------------------------------------------------------

def init_affine(rng, fan_in, fan_out, zero_bias=False):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in + 1, fan_out))
    if zero_bias:
        w[-1] = 0.0
    return w


def affine(x: Tensor, w: Tensor) -> Tensor:
    ones = Tensor(np.ones(x.shape[:-1] + (1,)))
    return ad.matmul(ad.concat([x, ones], axis=-1), w)


def mlp(x: Tensor, weights: list, final_tanh=False) -> Tensor:
    for i, w in enumerate(weights):
        x = affine(x, w)
        if i < len(weights) - 1 or final_tanh:
            x = ad.tanh(x)
    return x


def sliding_windows(values: Tensor, m: int) -> Tensor:
    """``(B, n, d) -> (B, n - m + 1, m * d)``; each row is one window flattened time-major."""
    n = values.shape[-2]
    length = n - m + 1
    return ad.concat([values[:, i:i + length, :] for i in range(m)], axis=-1)


def reparameterize(mean: Tensor, log_std: Tensor, seed=None, noise=None):
    """Reparameterized Gaussian sample and ``KL(q || N(0, I))`` per row.

    Returns ``(sample, kl)`` with ``kl`` of shape ``mean.shape[:-1]``.
    """
    mean, log_std = ad.as_tensor(mean), ad.as_tensor(log_std)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(mean.shape)
    std = ad.exp(log_std)
    sample = ad.add(mean, ad.mul(std, Tensor(noise)))
    # 0.5 * sum(exp(2 s) + m^2 - 1 - 2 s)
    terms = ad.sub(ad.add(ad.square(std), ad.square(mean)), ad.scale(log_std, 2.0))
    kl = ad.scale(ad.sub(ad.tsum(terms, axis=-1), Tensor(np.full(mean.shape[:-1], float(mean.shape[-1])))), 0.5)
    return sample, kl


def kl_standard_normal(mean, log_std) -> np.ndarray:
    mean, log_std = np.asarray(mean), np.asarray(log_std)
    return 0.5 * np.sum(np.exp(2 * log_std) + mean ** 2 - 1 - 2 * log_std, axis=-1)


def encode_point(values, mode: str = "last"):
    """First or last observed value; works on arrays ``(..., n, d)`` and tensors."""
    v = ad.as_tensor(values)
    if v.shape[-2] < 1:
        raise ValueError("need at least one observation")
    idx = 0 if mode == "first" else v.shape[-2] - 1
    out = v[..., idx, :]
    return out if isinstance(values, Tensor) else out.data


# -- the model -----------------------------------------------------------------

class Model:
    """Encoder-decoder pair for ``data_dim``-dimensional trajectories."""

    def __init__(self, encoder: EncoderConfig, decoder: DecoderConfig, data_dim: int):
        self.enc = encoder
        self.dec = decoder
        self.data_dim = data_dim
        if encoder.kind == "point" and encoder.variational:
            raise ValueError("the point encoder has no variational head")

    @property
    def latent_dim(self) -> int:
        if self.enc.kind == "point" or self.dec.kind in ("node", "anode"):
            return self.data_dim
        return self.enc.latent_dim

    @property
    def path_channels(self) -> int:
        return self.enc.path_channels(self.data_dim)

    @property
    def sig_features(self) -> int:
        return sig_dimension(self.path_channels, self.enc.depth)

    # -- parameter layout

    def param_layout(self) -> list[tuple[str, tuple, bool]]:
        """``(name, shape, zero_bias)`` in checkpoint order."""
        d, l = self.data_dim, self.latent_dim
        head = 2 * l if self.enc.variational else l
        out = []
        e = self.enc
        if e.kind == "signature":
            if e.learned_features > 0:
                out.append(("enc.phi.0", (e.window * d + 1, e.phi_hidden), False))
                out.append(("enc.phi.1", (e.phi_hidden + 1, e.learned_features), False))
            out.append(("enc.proj", (self.sig_features + 1, head), False))
        elif e.kind == "gru":
            fan = d + 1
            for k in range(e.gru_layers):
                out.append((f"enc.gru.{k}.input", (fan + 1, 3 * e.gru_hidden), True))
                out.append((f"enc.gru.{k}.hidden", (e.gru_hidden + 1, 3 * e.gru_hidden), True))
                fan = e.gru_hidden
            out.append(("enc.head", (e.gru_hidden + 1, head), False))
        c = self.dec
        if c.kind in ("node", "anode"):
            width = l + c.augment_dims
            dims = [width] + [c.hidden] * (c.layers - 1) + [width]
            for k in range(c.layers):
                out.append((f"dec.field.{k}", (dims[k] + 1, dims[k + 1]), False))
        else:
            for k in range(c.layers):
                out.append((f"dec.flow.{k}.alpha", (l,), False))
                out.append((f"dec.flow.{k}.g.0", (l + 2, c.hidden), False))
                out.append((f"dec.flow.{k}.g.1", (c.hidden + 1, l), False))
            out.append(("dec.readout.0", (l + 1, c.hidden), False))
            out.append(("dec.readout.1", (c.hidden + 1, d), False))
        return out

    def init_params(self, rng) -> dict[str, np.ndarray]:
        params = {}
        for name, shape, zero_bias in self.param_layout():
            if name.endswith("alpha"):
                params[name] = rng.uniform(0.5, 1.5, size=shape)
            else:
                params[name] = init_affine(rng, shape[0] - 1, shape[1], zero_bias)
        if self.dec.kind == "flow":
            renormalize_flow(self, params)
        return params

    def param_count(self, part: str | None = None) -> int:
        total = 0
        for name, shape, _ in self.param_layout():
            if part is None or name.startswith(part + "."):
                total += int(np.prod(shape))
        return total

    # -- encoders

    def lift(self, P, values: Tensor, times) -> Tensor:
        """Sliding-window lift: ``(B, n, d) -> (B, n - m + 1, e)``."""
        e = self.enc
        n = values.shape[-2]
        m = e.window
        if n < m:
            raise ValueError(f"series has {n} points; the window needs at least {m}")
        length = n - m + 1
        chans = []
        if e.learned_features > 0:
            win = sliding_windows(values, m)
            chans.append(mlp(win, [P["enc.phi.0"], P["enc.phi.1"]]))
        if e.include_original:
            chans.append(values[:, m - 1:, :])
        if e.include_time:
            t = np.broadcast_to(np.asarray(times)[m - 1:], (values.shape[0], length))
            chans.append(Tensor(t[..., None]))
        if not chans:
            raise ValueError("lift has no channels: enable learned features, original or time")
        return chans[0] if len(chans) == 1 else ad.concat(chans, axis=-1)

    def encode_signature(self, P, values: Tensor, times) -> Tensor:
        path = self.lift(P, values, times)
        if path.shape[-2] < 2:
            raise ValueError(
                f"lifted path has {path.shape[-2]} point(s); need n >= window + 1 = {self.enc.window + 1}"
            )
        feats = signature(path, self.enc.depth).flat()
        return affine(feats, P["enc.proj"])

    def encode_gru(self, P, values: Tensor, times) -> Tensor:
        B, n, _ = values.shape
        H = self.enc.gru_hidden
        t = Tensor(np.broadcast_to(np.asarray(times), (B, n))[..., None])
        seq = ad.concat([values, t], axis=-1)
        h = None
        for k in range(self.enc.gru_layers):
            gx_all = affine(seq, P[f"enc.gru.{k}.input"])
            wh = P[f"enc.gru.{k}.hidden"]
            h = Tensor(np.zeros((B, H)))
            outs = []
            for i in range(n):
                h = gru_cell(gx_all[:, i, :], h, wh, H)
                if k < self.enc.gru_layers - 1:
                    outs.append(ad.reshape(h, (B, 1, H)))
            if outs:
                seq = ad.concat(outs, axis=1)
        return affine(h, P["enc.head"])

    def encode(self, P, values, times, noise=None):
        """Latent initial state ``(B, l)`` and the per-row KL term (zeros if deterministic).

        ``noise`` is the standard-normal draw for the variational sample; when
        omitted the posterior mean is returned.
        """
        values = ad.as_tensor(values)
        kind = self.enc.kind
        if kind == "point":
            return encode_point(values, self.enc.point_mode), None
        out = self.encode_signature(P, values, times) if kind == "signature" else self.encode_gru(P, values, times)
        if not self.enc.variational:
            return out, None
        l = self.latent_dim
        mean, log_std = out[:, :l], out[:, l:]
        if noise is None:
            _, kl = reparameterize(mean, log_std, noise=np.zeros(mean.shape))
            return mean, kl
        return reparameterize(mean, log_std, noise=noise)

    # -- decoders

    def solver_step(self, query_times) -> float:
        if self.dec.solver_step is not None:
            return float(self.dec.solver_step)
        span = float(np.max(query_times)) if len(query_times) else 0.0
        return span / 200.0 if span > 0 else 1.0

    def vector_field(self, P, z: Tensor) -> Tensor:
        return mlp(z, [P[f"dec.field.{k}"] for k in range(self.dec.layers)])

    def decode_node(self, P, z0: Tensor, query_times) -> Tensor:
        """Euler-integrate from the anchor time 0, read out at ``query_times``."""
        q = np.asarray(query_times, dtype=np.float64)
        if np.any(q < 0) or np.any(np.diff(q) < 0):
            raise ValueError("query times must be non-decreasing and >= 0 (the anchor)")
        h = self.solver_step(q)
        steps = int(np.ceil(q.max() / h - 1e-9)) + 1 if len(q) else 0
        states = [z0]
        for _ in range(steps):
            states.append(ad.add(states[-1], ad.scale(self.vector_field(P, states[-1]), h)))
        B, D = z0.shape
        rows = []
        for t in q:
            pos = t / h
            k = int(np.floor(pos + 1e-9))
            w = pos - k
            if abs(w) < 1e-9:
                s = states[k]
            else:
                s = ad.add(ad.scale(states[k], 1.0 - w), ad.scale(states[k + 1], w))
            rows.append(ad.reshape(s, (B, 1, D)))
        return ad.concat(rows, axis=1)

    def decode_anode(self, P, z0: Tensor, query_times) -> Tensor:
        a = self.dec.augment_dims
        if a == 0:
            return self.decode_node(P, z0, query_times)
        B, d = z0.shape
        z = ad.concat([z0, Tensor(np.zeros((B, a)))], axis=-1)
        traj = self.decode_node(P, z, query_times)
        return traj[:, :, :d]

    def flow(self, P, z0: Tensor, query_times) -> Tensor:
        """Latent flow ``F(t, z0)`` at every query time: ``(B, l) -> (B, T, l)``."""
        q = np.asarray(query_times, dtype=np.float64)
        B, l = z0.shape
        T = len(q)
        z = ad.outer(Tensor(np.ones((B, T))), z0)
        t_col = Tensor(np.broadcast_to(q, (B, T))[..., None])
        t_flat = Tensor(np.broadcast_to(q, (B, T)).reshape(-1))
        for k in range(self.dec.layers):
            phi = ad.reshape(ad.tanh(ad.outer(t_flat, P[f"dec.flow.{k}.alpha"])), (B, T, l))
            g = mlp(ad.concat([z, t_col], axis=-1), [P[f"dec.flow.{k}.g.0"], P[f"dec.flow.{k}.g.1"]])
            z = ad.add(z, ad.mul(phi, g))
        return z

    def decode_flow(self, P, z0: Tensor, query_times) -> Tensor:
        return mlp(self.flow(P, z0, query_times), [P["dec.readout.0"], P["dec.readout.1"]])

    def decode(self, P, z0, query_times) -> Tensor:
        z0 = ad.as_tensor(z0)
        kind = self.dec.kind
        if kind == "node":
            return self.decode_node(P, z0, query_times)
        if kind == "anode":
            return self.decode_anode(P, z0, query_times)
        return self.decode_flow(P, z0, query_times)

    def forward(self, P, values, enc_times, query_times, noise=None):
        """Predicted trajectory ``(B, T, d)`` and per-row KL (or ``None``)."""
        z0, kl = self.encode(P, values, enc_times, noise=noise)
        return self.decode(P, z0, query_times), kl

    def predict(self, params: dict, values, enc_times, query_times) -> np.ndarray:
        """Tape-free evaluation on numpy parameters."""
        P = {k: Tensor(v) for k, v in params.items()}
        with ad.row_exact():
            return self.forward(P, values, enc_times, query_times)[0].data

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.enc), "decoder": asdict(self.dec), "data_dim": self.data_dim}

    @classmethod
    def from_config(cls, cfg: dict) -> "Model":
        return cls(EncoderConfig(**cfg["encoder"]), DecoderConfig(**cfg["decoder"]), cfg["data_dim"])


def gru_cell(gx: Tensor, h: Tensor, wh: Tensor, H: int) -> Tensor:
    """One GRU update given the precomputed input projection ``gx`` (B, 3H).

    Gate order in the 3H axis: reset, update, candidate.
    """
    gh = affine(h, wh)
    r = ad.sigmoid(ad.add(gx[:, :H], gh[:, :H]))
    u = ad.sigmoid(ad.add(gx[:, H:2 * H], gh[:, H:2 * H]))
    cand = ad.tanh(ad.add(gx[:, 2 * H:], ad.mul(r, gh[:, 2 * H:])))
    return ad.add(cand, ad.mul(u, ad.sub(h, cand)))


# -- contraction ---------------------------------------------------------------

def spectral_norm(w: np.ndarray) -> float:
    return float(np.linalg.norm(w, 2))


def renormalize_flow(model: Model, params: dict, target: float = SPECTRAL_TARGET) -> None:
    """Rescale each flow block's weights so ``||W0|| * ||W1|| <= target`` (in place).

    Norms are exact (SVD) on the weight part of each affine matrix; biases do
    not affect the Lipschitz constant.
    """
    for k in range(model.dec.layers):
        w0, w1 = params[f"dec.flow.{k}.g.0"], params[f"dec.flow.{k}.g.1"]
        prod = spectral_norm(w0[:-1]) * spectral_norm(w1[:-1])
        if prod > target:
            s = np.sqrt(target / prod)
            w0[:-1] *= s
            w1[:-1] *= s


def flow_lipschitz_bound(model: Model, params: dict, block: int = 0) -> float:
    return spectral_norm(params[f"dec.flow.{block}.g.0"][:-1]) * spectral_norm(params[f"dec.flow.{block}.g.1"][:-1])


def flow_g(model: Model, params: dict, block: int, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate one block's residual network ``g(t, z)`` on numpy inputs."""
    x = Tensor(np.concatenate([z, t[..., None]], axis=-1))
    return mlp(x, [Tensor(params[f"dec.flow.{block}.g.0"]), Tensor(params[f"dec.flow.{block}.g.1"])]).data


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    model: Model
    params: dict
    metadata: dict = field(default_factory=dict)

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        layout = self.model.param_layout()
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.model.config_dict(),
            "parameters": [{"name": n, "shape": list(s)} for n, s, _ in layout],
            "metadata": self.metadata,
        }
        blob = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n, _, _ in layout)
        (out / "weights.bin").write_bytes(blob)
        (out / "model.json").write_text(json.dumps(manifest, indent=2))
        return out

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        src = Path(directory)
        manifest = json.loads((src / "model.json").read_text())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
        model = Model.from_config(manifest["config"])
        flat = np.frombuffer((src / "weights.bin").read_bytes(), dtype="<f8")
        params, pos = {}, 0
        for entry in manifest["parameters"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape))
            params[entry["name"]] = flat[pos:pos + size].reshape(shape).astype(np.float64)
            pos += size
        if pos != flat.size:
            raise ValueError(f"weights.bin holds {flat.size} values, manifest describes {pos}")
        return cls(model, params, manifest.get("metadata", {}))
