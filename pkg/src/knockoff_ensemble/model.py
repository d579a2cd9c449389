"""Pairwise-connected feed-forward network with hand-written backprop and Adam.

Architecture, for ``p`` features and ``M`` knockoff copies::

    pairwise ((1+M)p -> p, no bias) -> dropout -> [Linear -> ELU] x depth
    -> concat(covariates) -> Linear(-> 1)

The L1 penalty applies to the first hidden layer's weight matrix.

All array math is written against an optional leading "model" axis. A
:class:`Network` built with :meth:`Network.stack` carries parameters of shape
``(G, ...)`` and advances ``G`` independent models per call; each member keeps
its own random stream for dropout so its trajectory matches training it alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NonFiniteLossError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"KNENSNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    p: int
    M: int = 1
    depth: int = 1
    hidden: int = 25
    lam: float = 0.0
    dropout: float = 0.5
    covariate_dim: int = 0
    task: str = "regression"
    seed: int = 0

    def validate(self) -> None:
        if self.p < 1 or self.M < 1:
            raise ConfigError(f"need p >= 1 and M >= 1, got p={self.p}, M={self.M}")
        if self.depth not in (1, 2, 3):
            raise ConfigError(f"depth must be 1, 2 or 3, got {self.depth}")
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be positive, got {self.hidden}")
        if self.lam < 0:
            raise ConfigError(f"L1 coefficient must be nonnegative, got {self.lam}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.covariate_dim < 0:
            raise ConfigError("covariate_dim must be nonnegative")
        if self.task not in ("regression", "binary"):
            raise ConfigError(f"unknown task {self.task!r}")

    @property
    def input_dim(self) -> int:
        return (1 + self.M) * self.p

    def architecture(self) -> tuple:
        """Fields that must agree for networks to be stacked."""
        return (self.p, self.M, self.depth, self.hidden, self.dropout, self.covariate_dim, self.task)


def param_shapes(cfg: NetworkConfig) -> dict:
    shapes = {"pairwise": (1 + cfg.M, cfg.p)}
    fan_in = cfg.p
    for layer in range(1, cfg.depth + 1):
        shapes[f"W{layer}"] = (fan_in, cfg.hidden)
        shapes[f"b{layer}"] = (cfg.hidden,)
        fan_in = cfg.hidden
    shapes["w_out"] = (cfg.hidden + cfg.covariate_dim,)
    shapes["b_out"] = ()
    return shapes


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "pairwise":
            # Bound from the layer's nominal (1+M)p -> p shape.
            params[name] = _glorot(rng, shape, cfg.input_dim, cfg.p)
        elif name.startswith("W"):
            params[name] = _glorot(rng, shape, *shape)
        elif name == "w_out":
            params[name] = _glorot(rng, shape, shape[0], 1)
        else:
            params[name] = np.zeros(shape)
    return params


class Network:
    """Parameters, Adam state and dropout stream(s) of one or many networks."""

    def __init__(self, config: NetworkConfig, params: Optional[dict] = None, rng=None):
        config.validate()
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params = params if params is not None else init_params(config, self.rng)
        self.lam = config.lam
        self.n_models = None
        self.rngs = [self.rng]
        self.reset_optimizer()

    def reset_optimizer(self) -> None:
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    @classmethod
    def stack(cls, nets: Sequence["Network"]) -> "Network":
        if not nets:
            raise ConfigError("cannot stack zero networks")
        arch = nets[0].config.architecture()
        if any(n.config.architecture() != arch for n in nets):
            raise ConfigError("stacked networks must share an architecture")
        if any(n.n_models is not None for n in nets):
            raise ConfigError("cannot stack already-stacked networks")
        out = cls.__new__(cls)
        out.config = nets[0].config
        out.params = {k: np.stack([n.params[k] for n in nets]) for k in nets[0].params}
        out.adam_m = {k: np.stack([n.adam_m[k] for n in nets]) for k in nets[0].params}
        out.adam_v = {k: np.stack([n.adam_v[k] for n in nets]) for k in nets[0].params}
        steps = {n.step for n in nets}
        if len(steps) != 1:
            raise ConfigError("stacked networks must be at the same optimizer step")
        out.step = steps.pop()
        out.lam = np.array([n.config.lam for n in nets])
        out.rngs = [n.rng for n in nets]
        out.rng = None
        out.n_models = len(nets)
        out._configs = [n.config for n in nets]
        return out

    def unstack(self) -> list:
        if self.n_models is None:
            return [self]
        nets = []
        for g in range(self.n_models):
            net = Network.__new__(Network)
            net.config = self._configs[g]
            net.params = {k: np.array(v[g]) for k, v in self.params.items()}
            net.adam_m = {k: np.array(v[g]) for k, v in self.adam_m.items()}
            net.adam_v = {k: np.array(v[g]) for k, v in self.adam_v.items()}
            net.step = self.step
            net.lam = self._configs[g].lam
            net.rng = self.rngs[g]
            net.rngs = [net.rng]
            net.n_models = None
            nets.append(net)
        return nets

    def view(self, start: int, stop: int) -> "Network":
        """Members ``start:stop`` of a stack, sharing parameter memory."""
        if self.n_models is None:
            raise ConfigError("view() needs a stacked network")
        out = Network.__new__(Network)
        out.config = self.config
        sl = slice(start, stop)
        out.params = {k: v[sl] for k, v in self.params.items()}
        out.adam_m = {k: v[sl] for k, v in self.adam_m.items()}
        out.adam_v = {k: v[sl] for k, v in self.adam_v.items()}
        out.step = self.step
        out.lam = self.lam[sl]
        out.rngs = self.rngs[sl]
        out.rng = None
        out._configs = self._configs[sl]
        out.n_models = len(out._configs)
        return out

    def n_parameters(self) -> int:
        per = sum(int(np.prod(s)) for s in param_shapes(self.config).values())
        return per if self.n_models is None else per * self.n_models


def elu(z):
    return np.maximum(z, 0.0) + np.expm1(np.minimum(z, 0.0))


def elu_grad_from_output(h):
    # ELU'(z) = 1 for z > 0, exp(z) = ELU(z) + 1 otherwise.
    return np.minimum(h, 0.0) + 1.0


def _bias(b):
    # (..., h) -> (..., 1, h) so it broadcasts over the batch axis.
    return np.expand_dims(b, -2)


def _check_inputs(net: Network, x, covariates):
    cfg = net.config
    if x.shape[-1] != cfg.input_dim:
        raise DataError(f"input has {x.shape[-1]} columns, network expects {cfg.input_dim}")
    if cfg.covariate_dim:
        if covariates is None or covariates.shape[-1] != cfg.covariate_dim:
            raise DataError(f"network expects {cfg.covariate_dim} covariate columns")
        if covariates.shape[-2] != x.shape[-2]:
            raise DataError("covariates and inputs disagree on the batch size")
    elif covariates is not None and np.size(covariates):
        raise DataError("network was configured without covariates")


def dropout_mask(net: Network, batch_size: int) -> np.ndarray:
    """Inverted-dropout scale factors, one draw per member stream."""
    keep = 1.0 - net.config.dropout
    shape = (batch_size, net.config.p)
    masks = [(rng.random(shape) < keep) / keep for rng in net.rngs]
    return masks[0] if net.n_models is None else np.stack(masks)


def _blocks(x, p, n_blocks):
    return [x[..., m * p : (m + 1) * p] for m in range(n_blocks)]


def forward(net: Network, x, covariates=None, train_mode: bool = False, mask=None):
    """Return ``(output, cache)``; output has shape ``(..., batch)``.

    In train mode a dropout mask is drawn from the network's stream unless
    one is passed explicitly.
    """
    cfg = net.config
    P = net.params
    x = np.asarray(x, dtype=float)
    _check_inputs(net, x, covariates)
    w = P["pairwise"]
    blocks = _blocks(x, cfg.p, 1 + cfg.M)
    a0 = blocks[0] * w[..., None, 0, :]
    for m in range(1, 1 + cfg.M):
        a0 += blocks[m] * w[..., None, m, :]
    if train_mode and cfg.dropout > 0:
        if mask is None:
            mask = dropout_mask(net, x.shape[-2])
        a0 *= mask
    else:
        mask = None
    h = a0
    acts = [h]
    for layer in range(1, cfg.depth + 1):
        h = elu(h @ P[f"W{layer}"] + _bias(P[f"b{layer}"]))
        acts.append(h)
    if cfg.covariate_dim:
        cov = np.broadcast_to(covariates, h.shape[:-1] + (cfg.covariate_dim,))
        h = np.concatenate([h, cov], axis=-1)
    out = (h @ P["w_out"][..., :, None])[..., 0] + np.expand_dims(P["b_out"], -1)
    cache = {"blocks": blocks, "mask": mask, "acts": acts, "top": h}
    return out, cache


def backward(net: Network, cache: dict, dout, params: bool = True, inputs: bool = True):
    """Gradients of ``sum(dout * output)`` w.r.t. parameters and inputs.

    Returns ``(grads, dx)``; either part is ``None`` when not requested.
    """
    cfg = net.config
    P = net.params
    grads = {} if params else None
    acts = cache["acts"]
    if params:
        grads["w_out"] = (cache["top"] * dout[..., None]).sum(axis=-2)
        grads["b_out"] = dout.sum(axis=-1)
    dh = dout[..., None] * np.expand_dims(P["w_out"][..., : cfg.hidden], -2)
    for layer in range(cfg.depth, 0, -1):
        dz = dh * elu_grad_from_output(acts[layer])
        if params:
            grads[f"W{layer}"] = np.swapaxes(acts[layer - 1], -1, -2) @ dz
            grads[f"b{layer}"] = dz.sum(axis=-2)
        dh = dz @ np.swapaxes(P[f"W{layer}"], -1, -2)
    if cache["mask"] is not None:
        dh = dh * cache["mask"]
    blocks = cache["blocks"]
    if params:
        grads["pairwise"] = np.stack([(b * dh).sum(axis=-2) for b in blocks], axis=-2)
    dx = None
    if inputs:
        w = P["pairwise"]
        dx = np.concatenate([dh * w[..., None, m, :] for m in range(len(blocks))], axis=-1)
    return grads, dx


def data_loss(out, y, task: str):
    """Mean data-fit loss over the batch axis and its gradient w.r.t. ``out``."""
    B = out.shape[-1]
    if task == "regression":
        resid = out - y
        return (resid**2).mean(axis=-1), 2.0 * resid / B
    prob = 0.5 * (1.0 + np.tanh(0.5 * out))
    loss = (np.logaddexp(0.0, out) - y * out).mean(axis=-1)
    return loss, (prob - y) / B


def l1_penalty(net: Network):
    lam = np.asarray(net.lam, dtype=float)
    return lam * np.abs(net.params["W1"]).sum(axis=(-2, -1))


def adam_update(param, grad, m, v, step, learning_rate):
    """One in-place Adam update at 1-based ``step``; returns the applied delta.

    Uses the folded bias correction ``lr / bc1 * m / (sqrt(v) / sqrt(bc2) + eps)``,
    algebraically equal to ``lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    m *= ADAM_BETA1
    m += (1 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1 - ADAM_BETA2) * (grad * grad)
    bc1 = 1 - ADAM_BETA1**step
    bc2 = 1 - ADAM_BETA2**step
    denom = np.sqrt(v)
    denom *= 1.0 / np.sqrt(bc2)
    denom += ADAM_EPS
    delta = m / denom
    delta *= -learning_rate / bc1
    param += delta
    return delta


def loss_and_grads(net: Network, batch, targets, covariates=None, train_mode=True, mask=None):
    out, cache = forward(net, batch, covariates, train_mode=train_mode, mask=mask)
    loss, dout = data_loss(out, np.asarray(targets, dtype=float), net.config.task)
    grads, _ = backward(net, cache, dout, inputs=False)
    lam = np.asarray(net.lam, dtype=float)
    grads["W1"] += lam[..., None, None] * np.sign(net.params["W1"])
    return loss + l1_penalty(net), grads


def train_step(
    net: Network,
    batch,
    targets,
    learning_rate: float = 1e-3,
    covariates=None,
    check_finite: bool = True,
    epoch=None,
    batch_index=None,
    mask=None,
):
    """One Adam step on the penalized loss. Returns the pre-update loss.

    For a stacked network the loss is a length-G array. With
    ``check_finite`` a non-finite loss raises :class:`NonFiniteLossError`.
    ``mask`` overrides the dropout draw.
    """
    if np.shape(batch)[-2] == 0:
        raise DataError("empty batch")
    with np.errstate(all="ignore"):
        loss, grads = loss_and_grads(net, batch, targets, covariates, mask=mask)
    if check_finite and not np.all(np.isfinite(loss)):
        raise NonFiniteLossError("non-finite training loss", epoch=epoch, batch=batch_index)
    net.step += 1
    with np.errstate(all="ignore"):
        for k, g in grads.items():
            adam_update(net.params[k], g, net.adam_m[k], net.adam_v[k], net.step, learning_rate)
    return loss if net.n_models is not None else float(loss)


def predict(net: Network, x, covariates=None):
    out, _ = forward(net, x, covariates, train_mode=False)
    return out


def input_gradient_importance(net: Network, X, covariates=None, method: str = "gradient"):
    """Importance of every augmented input column, length ``(1+M)p``.

    ``gradient``: mean over rows of ``|d output / d x_k|`` in eval mode.
    ``weights``: ``|pairwise weight|`` of each column (data-free).
    """
    if method == "weights":
        w = np.abs(net.params["pairwise"])
        return w.reshape(w.shape[:-2] + (net.config.input_dim,))
    if method != "gradient":
        raise ConfigError(f"unknown importance method {method!r}")
    X = np.asarray(X, dtype=float)
    if X.shape[-2] == 0:
        raise DataError("importance needs at least one row")
    out, cache = forward(net, X, covariates, train_mode=False)
    _, dx = backward(net, cache, np.ones_like(out), params=False)
    return np.abs(dx).mean(axis=-2)


def _param_order(cfg: NetworkConfig) -> list:
    return list(param_shapes(cfg))


def save_checkpoint(net: Network, path) -> None:
    """Flat record: magic, version, JSON config, little-endian float64 params."""
    if net.n_models is not None:
        raise ConfigError("checkpoints hold a single network; unstack first")
    header = json.dumps(asdict(net.config), sort_keys=True).encode("utf-8")
    block = np.concatenate([np.ravel(net.params[k]) for k in _param_order(net.config)])
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(block.astype("<f8").tobytes())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a network checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, offset)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset += 8
    cfg = NetworkConfig(**json.loads(raw[offset : offset + hlen].decode("utf-8")))
    offset += hlen
    block = np.frombuffer(raw, dtype="<f8", offset=offset).astype(float)
    params, pos = {}, 0
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        params[name] = block[pos : pos + size].reshape(shape).copy()
        pos += size
    if pos != block.size:
        raise DataError(f"{path}: parameter block size mismatch")
    return Network(cfg, params=params)
