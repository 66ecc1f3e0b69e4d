"""CommNet-style policy with shared weights and pluggable message encoders.

Pipeline per agent ``a``::

    h_0 = relu(o_a W_enc + b_enc)                 # the message that is sent
    c_i = encode(other agents' h_i [, h_i^a, o_a])
    h_{i+1} = relu([h_i ; c_i] W_comm + b_comm)    # repeated n_comm_steps times
    pi = softmax(h_S W_dec + b_dec)

Weights are stored ``[in, out]`` so a layer is ``x @ W + b``. All functions
accept leading batch axes: observations are ``[..., N, L]`` and hidden states
``[..., N, M]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENCODERS = ("mean", "attention", "none")


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int
    n_labels: int
    message_size: int = 16
    n_comm_steps: int = 1
    encoder_kind: str = "mean"

    def __post_init__(self):
        if self.encoder_kind not in ENCODERS:
            raise ValueError(f"encoder_kind must be one of {ENCODERS}, got {self.encoder_kind!r}")
        if self.message_size < 1:
            raise ValueError("message_size must be >= 1")
        if self.n_agents < 2 or self.n_labels < 2:
            raise ValueError("need at least 2 agents and 2 labels")
        if (self.n_comm_steps == 0) != (self.encoder_kind == "none"):
            raise ValueError("n_comm_steps must be 0 exactly when encoder_kind is 'none'")

    @property
    def n_actions(self) -> int:
        return self.n_agents


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    M, L, N = config.message_size, config.n_labels, config.n_actions
    shapes = {
        "encoder.weight": (L, M),
        "encoder.bias": (M,),
        "decoder.weight": (M, N),
        "decoder.bias": (N,),
    }
    if config.encoder_kind != "none":
        shapes["comm.weight"] = (2 * M, M)
        shapes["comm.bias"] = (M,)
    if config.encoder_kind == "attention":
        shapes["query.weight"] = (M + L, M)
        shapes["query.bias"] = (M,)
        shapes["key.weight"] = (M, M)
        shapes["key.bias"] = (M,)
        shapes["value.weight"] = (M, M)
        shapes["value.bias"] = (M,)
    return dict(sorted(shapes.items()))


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        layer = name.split(".")[0]
        fan_in = shapes[f"{layer}.weight"][0]
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap parameter arrays (shared memory, no copy) as tape leaves."""
    return {name: Tensor(arr, requires_grad=requires_grad, name=name) for name, arr in params.items()}


def _tensors(params) -> dict[str, Tensor]:
    first = next(iter(params.values()))
    return params if isinstance(first, Tensor) else as_tensors(params)


def _linear(x, p: dict[str, Tensor], layer: str) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{layer}.weight"]), p[f"{layer}.bias"])


def _as_rows(x) -> Tensor:
    """Lift a vector to a 1-row matrix so matmul applies."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return ad.reshape(x, (1, -1)) if x.ndim == 1 else x


def _squeeze_like(out: Tensor, like) -> Tensor:
    return ad.reshape(out, out.shape[1:]) if np.ndim(like.data if isinstance(like, Tensor) else like) == 1 else out


# ---------------------------------------------------------------------------
# pipeline stages


def encode_obs(obs, params) -> Tensor:
    """``h_0 = relu(o W + b)`` for one-hot observations ``[..., L]``."""
    p = _tensors(params)
    L = p["encoder.weight"].shape[0]
    shape = obs.shape if isinstance(obs, Tensor) else np.shape(obs)
    if shape[-1] != L:
        raise ValueError(f"observation length {shape[-1]} does not match n_labels {L}")
    x = _as_rows(obs)
    return _squeeze_like(ad.relu(_linear(x, p, "encoder")), obs)


def mean_encode(h_all, agent: int) -> Tensor:
    """Mean of every message except ``h_all[agent]`` (``h_all`` is ``[N, M]``)."""
    h = h_all if isinstance(h_all, Tensor) else Tensor(h_all)
    n = h.shape[0]
    if n < 2:
        raise ValueError("mean encoding needs at least 2 agents")
    return _row(mean_encode_all(h), agent)


def _row(x: Tensor, index: int) -> Tensor:
    """Differentiable ``x[index]`` along axis -2 via a selector matmul."""
    sel = np.zeros((1, x.shape[-2]))
    sel[0, index] = 1.0
    return ad.reshape(ad.matmul(Tensor(sel), x), x.shape[:-2] + x.shape[-1:])


def mean_encode_all(h: Tensor) -> Tensor:
    """Vectorized self-excluding mean: ``(sum_b h^b - h^a) / (N - 1)`` for every agent."""
    n = h.shape[-2]
    if n < 2:
        raise ValueError("mean encoding needs at least 2 agents")
    total = ad.sum(h, axis=-2, keepdims=True)
    return ad.mul(ad.sub(total, h), 1.0 / (n - 1))


def attention_encode(h_all, o_agent, agent: int, params) -> Tensor:
    """Single-agent attention encoding over the other agents' messages.

    The query comes from the agent's own message and observation; keys and
    values come from every *other* agent's message.
    """
    p = _tensors(params)
    h = h_all if isinstance(h_all, Tensor) else Tensor(h_all)
    n = h.shape[0]
    if n < 2:
        raise ValueError("attention encoding needs at least 2 agents")
    others = [b for b in range(n) if b != agent]
    pick = np.zeros((n - 1, n))
    pick[np.arange(n - 1), others] = 1.0
    h_others = ad.matmul(Tensor(pick), h)
    own = _row(h, agent)
    q = _linear(ad.reshape(ad.concat(own, o_agent), (1, -1)), p, "query")
    k = _linear(h_others, p, "key")
    v = _linear(h_others, p, "value")
    out = ad.scaled_dot_attention(q, k, v)
    return ad.reshape(out, (out.shape[-1],))


def attention_encode_all(h: Tensor, obs, params) -> Tensor:
    """Batched attention encoding for ``h: [..., N, M]`` and ``obs: [..., N, L]``.

    Keys/values are computed for every agent once; each agent's own key is
    masked out of its softmax, which is equivalent to attending over the others.
    """
    p = _tensors(params)
    n = h.shape[-2]
    if n < 2:
        raise ValueError("attention encoding needs at least 2 agents")
    q = _linear(ad.concat(h, obs), p, "query")
    k = _linear(h, p, "key")
    v = _linear(h, p, "value")
    mask = ~np.eye(n, dtype=bool)
    return ad.scaled_dot_attention(q, k, v, mask=mask)


def comm_step(h, c, params) -> Tensor:
    """``h' = relu([h ; c] W + b)``."""
    p = _tensors(params)
    if "comm.weight" not in p:
        raise ValueError("model has no communication layer")
    x = ad.concat(_as_rows(h), _as_rows(c))
    return _squeeze_like(ad.relu(_linear(x, p, "comm")), h)


def decode_logits(h, params) -> Tensor:
    p = _tensors(params)
    return _squeeze_like(_linear(_as_rows(h), p, "decoder"), h)


def decode(h, params) -> Tensor:
    """Action distribution ``softmax(h W + b)``."""
    return ad.softmax_rows(decode_logits(h, params))


# ---------------------------------------------------------------------------
# joint forward pass


@dataclass
class JointForwardTrace:
    hidden: list[Tensor] = field(default_factory=list)
    comm: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None
    probs: Tensor | None = None


def forward_joint(observations, params, config: ModelConfig) -> JointForwardTrace:
    """Run encode, ``n_comm_steps`` rounds of message passing, then decode.

    ``observations`` is ``[N, L]`` or ``[B, N, L]``. Pass parameters from
    :func:`as_tensors` with ``requires_grad=True`` to record a tape.
    """
    obs = observations if isinstance(observations, Tensor) else Tensor(observations)
    if obs.ndim not in (2, 3) or obs.shape[-2:] != (config.n_agents, config.n_labels):
        raise ValueError(
            f"observations of shape {obs.shape} do not match {config.n_agents} agents x {config.n_labels} labels"
        )
    p = _tensors(params)
    trace = JointForwardTrace()
    h = ad.relu(_linear(obs, p, "encoder"))
    trace.hidden.append(h)
    for _ in range(config.n_comm_steps):
        if config.encoder_kind == "mean":
            c = mean_encode_all(h)
        else:
            c = attention_encode_all(h, obs, p)
        trace.comm.append(c)
        h = ad.relu(_linear(ad.concat(h, c), p, "comm"))
        trace.hidden.append(h)
    trace.logits = _linear(h, p, "decoder")
    trace.probs = ad.softmax_rows(trace.logits)
    return trace


def policy_probs(observations, params: dict[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """Action distributions without recording gradients."""
    return forward_joint(observations, params, config).probs.data


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    """JSON mapping name -> {"shape": [...], "values": [row-major floats]}, names sorted."""
    doc = {
        name: {"shape": list(arr.shape), "values": [float(x) for x in np.ravel(arr)]}
        for name, arr in sorted(params.items())
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or not doc:
        raise ValueError(f"checkpoint {path} holds no parameters")
    params = {}
    for name, entry in doc.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            params[name] = values.reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed checkpoint entry {name!r}: {exc}") from exc
    return params


def config_from_params(params: dict[str, np.ndarray]) -> ModelConfig:
    """Recover the model configuration implied by a set of parameter shapes.

    The number of communication steps is not visible in the shapes (the comm
    layer is reused every step), so one step is assumed.
    """
    L, M = params["encoder.weight"].shape
    N = params["decoder.weight"].shape[1]
    if "query.weight" in params:
        kind = "attention"
    elif "comm.weight" in params:
        kind = "mean"
    else:
        kind = "none"
    return ModelConfig(N, L, M, 0 if kind == "none" else 1, kind)
