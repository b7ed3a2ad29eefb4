"""Deterministic toy MoE "reasoning" model.

Each decoding step feeds the previous token through ``L`` MoE layers
(softmax router, top-O selection, renormalized weights, optional steering)
with a residual connection and RMS normalization, then emits a token
greedily from a grammar-constrained head. The grammar forces the shape::

    <think> (content | Alternatively)* </think> A<q> <eos>

Experts never write along a fixed "focus" direction unless planted. A
planted expert writes along it, and the accumulated focus suppresses
"Alternatively" and strengthens recall of the prompt when choosing the
answer, so reinforcing the planted expert has a measurable effect.

Planting works in two passes per step. The first pass runs with the target
expert's router logit lowered by ``bias``. If it emits the plant's marker,
the step is recomputed with the logit raised by ``bias``; the marker stays
the emitted token, and the routing and hidden state of the second pass are
recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import SplitMix64
from .steering import SteeringConfig
from .trace import ExpertKey, MarkerSet, ModelShape, RoutingEvent, TraceCorpus, TraceInstance

THINK, CLOSE, ALT, EOS = "<think>", "</think>", "Alternatively", "<eos>"
N_PROBLEMS = 16
N_CONTENT = 28


def default_vocab() -> tuple[str, ...]:
    return (
        (THINK, CLOSE, ALT, EOS)
        + tuple(f"Q{i}" for i in range(N_PROBLEMS))
        + tuple(f"A{i}" for i in range(N_PROBLEMS))
        + tuple(f"w{i}" for i in range(N_CONTENT))
    )


VOCAB = default_vocab()
_ID = {t: i for i, t in enumerate(VOCAB)}
_Q0, _A0, _W0 = _ID["Q0"], _ID["A0"], _ID["w0"]


@dataclass(frozen=True)
class Dynamics:
    """Emission constants of the toy model."""

    min_think: int = 4
    max_think: int = 40
    alt_bias: float = 0.5
    alt_gain: float = 1.5
    close_bias: float = 0.6
    recall: float = 1.2
    router_scale: float = 1.5
    carry_decay: float = 0.5


@dataclass(frozen=True)
class PlantSpec:
    target: ExpertKey
    bias: float
    marker: str = THINK
    focus_gain: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "target", ExpertKey(*self.target))
        if self.bias < 0:
            raise ValueError(f"plant bias must be >= 0, got {self.bias}")

    @classmethod
    def parse(cls, text: str) -> "PlantSpec":
        """Parse ``"layer,expert,bias,marker"``."""
        parts = text.split(",", 3)
        if len(parts) != 4:
            raise ValueError(f"plant spec must be 'layer,expert,bias,marker', got {text!r}")
        layer, expert, bias, marker = parts
        return cls(ExpertKey(int(layer), int(expert)), float(bias), marker)


@dataclass(frozen=True, eq=False)
class ToyMoeModel:
    shape: ModelShape
    dim: int
    seed: int
    embed: np.ndarray  # (V, d)
    router: np.ndarray  # (L, N, d)
    experts: np.ndarray  # (L, N, d, d)
    emitter: np.ndarray  # (V, d)
    focus: np.ndarray  # (d,) unit vector
    focus_gain: np.ndarray  # (L, N)
    dynamics: Dynamics = field(default_factory=Dynamics)
    plants: tuple[PlantSpec, ...] = ()
    vocab: tuple[str, ...] = VOCAB

    def token_id(self, token: str) -> int:
        try:
            return _ID[token]
        except KeyError:
            raise ValueError(f"token {token!r} not in the toy vocabulary") from None


def build_model(seed: int, shape: ModelShape | None = None, dim: int = 32, dynamics: Dynamics | None = None) -> ToyMoeModel:
    """Draw all parameters from named SplitMix64 streams of ``seed``."""
    shape = shape or ModelShape(4, 16, 2)
    dynamics = dynamics or Dynamics()
    L, N, d, V = shape.n_layers, shape.n_experts, dim, len(VOCAB)
    rng = SplitMix64(seed)
    focus = rng.fork("focus").normal(d)
    focus /= np.linalg.norm(focus)
    embed = rng.fork("embed").normal(V * d).reshape(V, d)
    router = rng.fork("router").normal(L * N * d).reshape(L, N, d) * (dynamics.router_scale / np.sqrt(d))
    experts = rng.fork("experts").normal(L * N * d * d).reshape(L, N, d, d) / np.sqrt(d)
    # remove the focus component from every expert's output
    experts = experts - focus[:, None] * np.einsum("i,lnij->lnj", focus, experts)[:, :, None, :]
    emitter = rng.fork("emitter").normal(V * d).reshape(V, d) / np.sqrt(d)
    return ToyMoeModel(shape, d, seed, embed, router, experts, emitter, focus, np.zeros((L, N)), dynamics)


def plant(model: ToyMoeModel, spec: PlantSpec) -> ToyMoeModel:
    if not model.shape.contains(spec.target):
        raise ValueError(f"plant target {spec.target} outside shape {model.shape}")
    model.token_id(spec.marker)
    if spec.bias == 0:
        return model
    if any(p.target == spec.target for p in model.plants):
        raise ValueError(f"expert {spec.target} is already planted")
    gain = model.focus_gain.copy()
    gain[spec.target] += spec.focus_gain
    return replace(model, plants=model.plants + (spec,), focus_gain=gain)


# -- gating and steering ----------------------------------------------------------


@dataclass(frozen=True)
class GateDecision:
    layer: int
    selected: tuple[tuple[ExpertKey, float], ...]
    raw_probs: tuple[float, ...]

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(w for _, w in self.selected)

    @property
    def experts(self) -> tuple[ExpertKey, ...]:
        return tuple(k for k, _ in self.selected)


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # batch-size independent dot products: a (B, d) with b (..., d) rows
    return (a[:, None, :] * b[None, :, :]).sum(-1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _gate_batch(logits: np.ndarray, top_o: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    probs = _softmax(logits)
    # stable sort on -p keeps lower expert ids first among ties
    idx = np.argsort(-probs, axis=1, kind="stable")[:, :top_o]
    sel = np.take_along_axis(probs, idx, axis=1)
    w = sel * (1.0 / sel.sum(axis=1, keepdims=True))
    return idx, w, probs


def _steer_batch(idx: np.ndarray, w: np.ndarray, betas: np.ndarray, renormalize: bool) -> np.ndarray:
    """Multiply selected weights by their experts' multipliers (1 = untouched)."""
    b = betas[idx]
    hit = b != 1.0
    if not hit.any():
        return w
    out = w.copy()
    out[hit] = w[hit] * b[hit]
    if renormalize:
        rows = hit.any(axis=1)
        out[rows] = out[rows] * (1.0 / out[rows].sum(axis=1, keepdims=True))
    return out


def _beta_table(config: SteeringConfig, shape: ModelShape) -> np.ndarray:
    betas = np.ones((shape.n_layers, shape.n_experts))
    for key, beta in config.entries:
        betas[key.layer, key.expert] = beta
    return betas


def gate(logits, top_o: int, layer: int = 0) -> GateDecision:
    """Softmax over all experts, keep the ``top_o`` most probable, renormalize."""
    z = np.asarray(logits, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(z)):
        raise ValueError("gate logits must be finite")
    if not 1 <= top_o <= z.shape[1]:
        raise ValueError(f"need 1 <= top_o <= {z.shape[1]}, got {top_o}")
    idx, w, probs = _gate_batch(z, top_o)
    selected = tuple((ExpertKey(layer, int(e)), float(x)) for e, x in zip(idx[0], w[0]))
    return GateDecision(layer, selected, tuple(float(p) for p in probs[0]))


def apply_steering(decision: GateDecision, config: SteeringConfig) -> GateDecision:
    mults = config.multipliers
    b = np.array([mults.get(k, 1.0) for k in decision.experts])
    w = np.array(decision.weights)
    idx = np.arange(len(b))[None, :]
    out = _steer_batch(idx, w[None, :], b, config.renormalize)[0]
    if out is w or np.array_equal(out, w):
        return decision
    selected = tuple((k, float(x)) for k, x in zip(decision.experts, out))
    return GateDecision(decision.layer, selected, decision.raw_probs)


def expert_output(model: ToyMoeModel, key: ExpertKey, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    W = model.experts[key.layer, key.expert]
    out = _rowdot(x, W)[0]
    return out + model.focus_gain[key] * np.linalg.norm(x) * model.focus


def layer_logits(model: ToyMoeModel, x: np.ndarray, layer: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return _rowdot(x, model.router[layer])[0]


def layer_forward(
    model: ToyMoeModel, x, layer: int, config: SteeringConfig | None = None, decision: GateDecision | None = None
) -> np.ndarray:
    """MoE output of one layer: sum of the selected experts' outputs times their weights.

    ``decision`` overrides the model's own gate (used for planted steps and
    tests); steering from ``config`` is applied on top of it.
    """
    x = np.asarray(x, dtype=np.float64)
    if decision is None:
        decision = gate(layer_logits(model, x, layer), model.shape.top_o, layer)
    if config is not None:
        decision = apply_steering(decision, config)
    h = np.zeros_like(x)
    for key, w in decision.selected:
        h = h + w * expert_output(model, key, x)
    return h


# -- batched generation -------------------------------------------------------------


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=1, keepdims=True))


def _pos(t: int, d: int) -> np.ndarray:
    i = np.arange(d // 2)
    ang = t / (10000.0 ** (2 * i / d))
    return 0.5 * np.concatenate([np.sin(ang), np.cos(ang)])


def _plant_offsets(model: ToyMoeModel, boosted_marker: str | None) -> np.ndarray:
    off = np.zeros((model.shape.n_layers, model.shape.n_experts))
    for p in model.plants:
        off[p.target] += p.bias if p.marker == boosted_marker else -p.bias
    return off


def _forward(model: ToyMoeModel, x: np.ndarray, offsets: np.ndarray, betas: np.ndarray, renormalize: bool):
    """Run all layers for a batch; returns final hidden, focus increment, per-layer (idx, w)."""
    O = model.shape.top_o
    focus_inc = np.zeros(x.shape[0])
    routes = []
    for layer in range(model.shape.n_layers):
        logits = _rowdot(x, model.router[layer]) + offsets[layer]
        idx, w, _ = _gate_batch(logits, O)
        w = _steer_batch(idx, w, betas[layer], renormalize)
        W = model.experts[layer][idx]  # (B, O, d, d)
        outs = (W * x[:, None, None, :]).sum(-1)  # (B, O, d)
        gain = model.focus_gain[layer][idx]  # (B, O)
        if gain.any():
            outs = outs + (gain * np.sqrt((x * x).sum(axis=1))[:, None])[:, :, None] * model.focus
        h = np.zeros_like(x)
        for j in range(O):
            h = h + w[:, j : j + 1] * outs[:, j]
        focus_inc += (h * model.focus).sum(axis=1) / np.sqrt((x * x).sum(axis=1))
        x = _rmsnorm(x + h)
        routes.append((idx, w))
    return x, focus_inc, routes


def _emit(model: ToyMoeModel, x, focus, memory, phase, think_len) -> np.ndarray:
    dyn = model.dynamics
    V = len(model.vocab)
    logits = _rowdot(x, model.emitter)
    logits[:, _ID[ALT]] += dyn.alt_bias - dyn.alt_gain * focus
    logits[:, _ID[CLOSE]] += dyn.close_bias
    q = model.embed[_Q0 : _Q0 + N_PROBLEMS]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    mem = memory / np.maximum(np.linalg.norm(memory, axis=1, keepdims=True), 1e-12)
    logits[:, _A0 : _A0 + N_PROBLEMS] += dyn.recall * (1.0 + focus)[:, None] * _rowdot(mem, qn)

    allowed = np.zeros((x.shape[0], V), dtype=bool)
    allowed[phase == 0, _ID[THINK]] = True
    thinking = phase == 1
    can_close = thinking & (think_len >= dyn.min_think)
    must_close = thinking & (think_len >= dyn.max_think)
    free = thinking & ~must_close
    allowed[np.ix_(free, [_ID[ALT]] + list(range(_W0, _W0 + N_CONTENT)))] = True
    allowed[can_close, _ID[CLOSE]] = True
    allowed[np.ix_(phase == 2, list(range(_A0, _A0 + N_PROBLEMS)))] = True
    allowed[phase == 3, _ID[EOS]] = True
    return np.where(allowed, logits, -np.inf)


def generate_batch(
    model: ToyMoeModel,
    prompts: list[list[str]],
    config: SteeringConfig | None = None,
    max_tokens: int = 64,
    instance_ids: list[str] | None = None,
    domains: list[str] | None = None,
) -> list[tuple[list[str], TraceInstance]]:
    """Greedy decoding of several independent prompts in lockstep.

    Row results do not depend on batch composition: every reduction runs
    along a per-row axis.
    """
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    config = config or SteeringConfig()
    config.validate(model.shape)
    B = len(prompts)
    ids = instance_ids or [f"inst-{i:05d}" for i in range(B)]
    doms = domains or ["synthetic"] * B
    betas = _beta_table(config, model.shape)
    d = model.dim

    prompt_ids = [[model.token_id(t) for t in p] for p in prompts]
    memory = np.stack([model.embed[p].mean(axis=0) if p else np.zeros(d) for p in prompt_ids]) if B else np.zeros((0, d))
    carry = memory.copy()
    prev = np.array([p[-1] if p else _ID[EOS] for p in prompt_ids], dtype=np.int64)
    focus = np.zeros(B)
    phase = np.zeros(B, dtype=np.int64)
    think_len = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    tokens: list[list[str]] = [[] for _ in range(B)]
    events: list[list[RoutingEvent]] = [[] for _ in range(B)]

    base_off = _plant_offsets(model, None)
    plant_markers = sorted({p.marker for p in model.plants})

    for t in range(max_tokens):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        x0 = _rmsnorm(model.embed[prev[rows]] + carry[rows] + _pos(t, d))
        x, finc, routes = _forward(model, x0, base_off, betas, config.renormalize)
        logits = _emit(model, x, focus[rows] + finc, memory[rows], phase[rows], think_len[rows])
        tok = np.argmax(logits, axis=1)

        for marker in plant_markers:
            hit = tok == _ID[marker]
            if not hit.any():
                continue
            x2, finc2, routes2 = _forward(model, x0[hit], _plant_offsets(model, marker), betas, config.renormalize)
            x[hit], finc[hit] = x2, finc2
            for (idx, w), (idx2, w2) in zip(routes, routes2):
                idx[hit], w[hit] = idx2, w2

        focus[rows] += finc
        carry[rows] = model.dynamics.carry_decay * carry[rows] + (1 - model.dynamics.carry_decay) * x
        prev[rows] = tok
        for j, r in enumerate(rows):
            text = model.vocab[tok[j]]
            sel = tuple(
                (ExpertKey(layer, int(idx[j, o])), float(w[j, o]))
                for layer, (idx, w) in enumerate(routes)
                for o in range(idx.shape[1])
            )
            events[r].append(RoutingEvent(t, text, sel))
            tokens[r].append(text)
        ph = phase[rows]
        ph_new = ph.copy()
        ph_new[ph == 0] = 1
        ph_new[(ph == 1) & (tok == _ID[CLOSE])] = 2
        ph_new[ph == 2] = 3
        ph_new[ph == 3] = 4
        think_len[rows] += (ph == 1) & (tok != _ID[CLOSE])
        phase[rows] = ph_new
        active[rows[tok == _ID[EOS]]] = False

    return [(tokens[i], TraceInstance(ids[i], doms[i], tuple(events[i]))) for i in range(B)]


def generate(
    model: ToyMoeModel,
    prompt: list[str],
    config: SteeringConfig | None = None,
    max_tokens: int = 64,
    instance_id: str = "inst-00000",
    domain: str = "synthetic",
) -> tuple[list[str], TraceInstance]:
    return generate_batch(model, [prompt], config, max_tokens, [instance_id], [domain])[0]


# -- tasks --------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    task_id: str
    prompt: tuple[str, ...]
    answer: str
    domain: str = "synthetic"


def make_tasks(n: int, seed: int, domain: str = "synthetic") -> list[Task]:
    """``n`` problems; problem q has prompt ``Q<q>`` and answer ``A<q>``."""
    qs = SplitMix64(seed).fork("tasks").integers(N_PROBLEMS, n)
    return [Task(f"task-{i:05d}", (f"Q{q}",), f"A{q}", domain) for i, q in enumerate(qs)]


def run_tasks(
    model: ToyMoeModel, tasks: list[Task], config: SteeringConfig | None = None, max_tokens: int = 64
) -> list[tuple[list[str], TraceInstance]]:
    return generate_batch(
        model,
        [list(t.prompt) for t in tasks],
        config,
        max_tokens,
        [t.task_id for t in tasks],
        [t.domain for t in tasks],
    )


def simulate(
    model: ToyMoeModel,
    tasks: list[Task],
    config: SteeringConfig | None = None,
    max_tokens: int = 64,
    markers: MarkerSet | None = None,
) -> TraceCorpus:
    results = run_tasks(model, tasks, config, max_tokens)
    return TraceCorpus(model.shape, tuple(inst for _, inst in results), markers or MarkerSet.default())
