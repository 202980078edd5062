"""Small feed-forward networks: proxy regressors and the time-conditioned
noise predictor. Parameters are flat lists of float64 arrays so they plug
directly into the autodiff tape and the Adam updater."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

LAYERNORM_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden_units: int
    num_layers: int  # hidden layers
    activation: str = "gelu"
    layer_norm: bool = False

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")


def param_names(spec: MlpSpec) -> list[str]:
    names = []
    for i in range(spec.num_layers):
        names += [f"W{i}", f"b{i}"]
        if spec.layer_norm:
            names += [f"ln{i}.scale", f"ln{i}.shift"]
    names += ["W_out", "b_out"]
    return names


def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_out: bool = False) -> list[np.ndarray]:
    """Kaiming-uniform fan-in init; optionally zero the output layer."""
    params = []
    fan_in = spec.in_dim
    for _ in range(spec.num_layers):
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, spec.hidden_units)))
        params.append(np.zeros(spec.hidden_units))
        if spec.layer_norm:
            params.append(np.ones(spec.hidden_units))
            params.append(np.zeros(spec.hidden_units))
        fan_in = spec.hidden_units
    if zero_out:
        params.append(np.zeros((fan_in, spec.out_dim)))
    else:
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, spec.out_dim)))
    params.append(np.zeros(spec.out_dim))
    return params


def _layer_norm(z, scale, shift):
    mu = ad.mean(z, axis=-1, keepdims=True)
    centered = ad.sub(z, mu)
    var = ad.mean(ad.square(centered), axis=-1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, LAYERNORM_EPS)))
    return ad.add(ad.mul(normed, scale), shift)


def mlp_forward(spec: MlpSpec, params: list, x):
    """Apply the MLP to x of shape (n, in_dim); output layer stays linear."""
    if ad.shape_of(x)[-1] != spec.in_dim:
        raise ValueError(
            f"input dim {ad.shape_of(x)[-1]} does not match spec.in_dim {spec.in_dim}")
    h = x
    k = 0
    for _ in range(spec.num_layers):
        h = ad.add(ad.matmul(h, params[k]), params[k + 1])
        k += 2
        if spec.layer_norm:
            h = _layer_norm(h, params[k], params[k + 1])
            k += 2
        h = ad.gelu(h)
    return ad.add(ad.matmul(h, params[k]), params[k + 1])


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal embedding table for integer steps 1..max_t."""

    dim: int
    max_t: int

    def __post_init__(self):
        if self.dim % 2 != 0 or self.dim < 2:
            raise ValueError("embedding dim must be a positive even number")

    def table(self) -> np.ndarray:
        half = self.dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
        t = np.arange(1, self.max_t + 1)[:, None]
        ang = t * freqs[None, :]
        emb = np.zeros((self.max_t, self.dim))
        emb[:, 0::2] = np.sin(ang)
        emb[:, 1::2] = np.cos(ang[:, : self.dim - half])
        return emb


@dataclass(frozen=True)
class NoiseNet:
    """Noise predictor eps(x_t, t): MLP over concat(x_t, time_embed(t))."""

    data_dim: int
    spec: MlpSpec
    embed: TimeEmbedding

    def __post_init__(self):
        if self.spec.in_dim != self.data_dim + self.embed.dim:
            raise ValueError("spec.in_dim must equal data_dim + embed.dim")
        object.__setattr__(self, "_table", self.embed.table())


def make_noise_net(data_dim: int, hidden_units: int, num_layers: int, num_steps: int,
                   embed_dim: int = 64, layer_norm: bool = False) -> NoiseNet:
    # layer norm in a plain (non-residual) noise predictor erases amplitude
    # information and destabilizes the reverse chain tails; off by default
    spec = MlpSpec(
        in_dim=data_dim + embed_dim,
        out_dim=data_dim,
        hidden_units=hidden_units,
        num_layers=num_layers,
        layer_norm=layer_norm,
    )
    return NoiseNet(data_dim, spec, TimeEmbedding(embed_dim, num_steps))


def init_noise_net(net: NoiseNet, rng: np.random.Generator) -> list[np.ndarray]:
    # zero output layer: the untrained reverse process is pure noise decay
    return init_mlp(net.spec, rng, zero_out=True)


def noise_net_forward(net: NoiseNet, params: list, x_t, t):
    """eps-hat for x_t of shape (n, d) at integer steps t (scalar or (n,))."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > net.embed.max_t):
        raise ValueError(f"t out of range 1..{net.embed.max_t}")
    n = ad.shape_of(x_t)[0]
    emb = net._table[np.broadcast_to(t, (n,)) - 1]
    inp = ad.concat(x_t, emb, axis=1)
    return mlp_forward(net.spec, params, inp)


# --- checkpointing -----------------------------------------------------------
# Layout: one JSON header line (spec, shapes, seed), then the raw float64
# little-endian parameter data concatenated in order.


def save_params(path, spec: MlpSpec, params: list[np.ndarray], seed: int | None = None):
    header = {
        "spec": asdict(spec),
        "shapes": [list(p.shape) for p in params],
        "seed": seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        spec = MlpSpec(**header["spec"])
        params = []
        for shp in header["shapes"]:
            count = int(np.prod(shp)) if shp else 1
            buf = fh.read(count * 8)
            params.append(np.frombuffer(buf, dtype="<f8").reshape(shp).copy())
    return spec, params, header.get("seed")
