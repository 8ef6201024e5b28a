"""First-order meta-training with generated softmax heads and warp layers.

Per episode: encode the support set, generate the task head (W, b) as the
class-wise mean of a deep-set MLP over support encodings, then run G inner
SGD steps on fast weights theta = {non-warp encoder params, h_phi, W, b}
using one learned step size per parameter group. After every inner step the
validation gradient at the adapted weights is accumulated into the outer
gradient q. The outer update moves Theta = {warp, non-warp encoder, g_psi,
alphas}; the h_phi initialization is deliberately not part of Theta, it only
adapts within episodes (its learned step size is).

First-order rule: the inner-step gradients are treated as constants. The
adapted weights then depend linearly on the initial weights (identity
Jacobian), on each alpha (via minus the running sum of inner gradients), and
on (W, b) through the generation graph, whose backward runs once per episode
with the summed validation cotangents.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Node, Tape, backward, backward_from
from .encoder import (
    EncoderConfig,
    ParamEntry,
    ParamTree,
    encode_batch,
    init_params,
    truncated_normal,
)
from .tasks import Episode, EpisodeSampler, TaskSamplingError, episode_rng

SOFTMAX_GROUP = "softmax_Wb"
HPHI_GROUP = "h_phi"
GPSI_GROUP = "g_psi"
ALPHA_INIT = 1e-3

LOG_FIXED_COLUMNS = ["step", "provenance", "inner_losses", "val_loss", "val_acc"]


class NumericalError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""


@dataclass
class GeneratorConfig:
    model_dim: int
    gen_dim: int = 32  # d; head rows are (d+1)-vectors (weight + bias)

    def to_dict(self) -> dict:
        return {"model_dim": self.model_dim, "gen_dim": self.gen_dim}


def init_generator(cfg: GeneratorConfig, seed: int) -> ParamTree:
    """Two 2-layer tanh MLPs: g_psi (outer-trained set encoder, output d+1)
    and h_phi (inner-adapted feature map, output d).

    Fan-in scaled init rather than the encoder's 0.02: the generated head is
    a product of g_psi and h_phi outputs, and with 0.02-scale weights on both
    the logits start around 1e-4, leaving the outer loop no usable gradient
    when training from scratch (the reference setup sidesteps this by starting
    from a pre-trained encoder).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    m, d = cfg.model_dim, cfg.gen_dim
    s = 1.0 / math.sqrt(m)
    entries = [
        ParamEntry("g_psi.w1", truncated_normal(rng, (m, m), s), GPSI_GROUP, False, False),
        ParamEntry("g_psi.b1", np.zeros(m), GPSI_GROUP, False, False),
        ParamEntry("g_psi.w2", truncated_normal(rng, (m, d + 1), s), GPSI_GROUP, False, False),
        ParamEntry("g_psi.b2", np.zeros(d + 1), GPSI_GROUP, False, False),
        ParamEntry("h_phi.w1", truncated_normal(rng, (m, m), s), HPHI_GROUP, False, True),
        ParamEntry("h_phi.b1", np.zeros(m), HPHI_GROUP, False, True),
        ParamEntry("h_phi.w2", truncated_normal(rng, (m, d), s), HPHI_GROUP, False, True),
        ParamEntry("h_phi.b2", np.zeros(d), HPHI_GROUP, False, True),
    ]
    return ParamTree(entries)


@dataclass
class LearningRates:
    """One learned raw-valued step size per inner-adaptable group, plus the
    outer step size beta."""

    alphas: dict[str, float]
    outer_lr: float

    def copy(self) -> "LearningRates":
        return LearningRates(dict(self.alphas), self.outer_lr)


@dataclass
class MetaModel:
    enc_cfg: EncoderConfig
    gen_cfg: GeneratorConfig
    enc: ParamTree
    gen: ParamTree
    lrs: LearningRates

    def alpha_group_names(self) -> list[str]:
        return self.enc.adaptable_groups() + [HPHI_GROUP, SOFTMAX_GROUP]

    def fast_group_of(self, name: str) -> str:
        if name.startswith("softmax."):
            return SOFTMAX_GROUP
        if name.startswith("h_phi."):
            return HPHI_GROUP
        return self.enc.group_of(name)

    def copy(self) -> "MetaModel":
        return MetaModel(self.enc_cfg, self.gen_cfg, self.enc.copy(), self.gen.copy(), self.lrs.copy())


def init_model(
    enc_cfg: EncoderConfig,
    gen_cfg: GeneratorConfig,
    seed: int,
    outer_lr: float,
    alpha_init: float = ALPHA_INIT,
) -> MetaModel:
    enc = init_params(enc_cfg, seed)
    gen = init_generator(gen_cfg, seed)
    model = MetaModel(enc_cfg, gen_cfg, enc, gen, LearningRates({}, outer_lr))
    model.lrs.alphas = {g: alpha_init for g in model.alpha_group_names()}
    return model


# ----------------------------------------------------------------- graph parts


def _mlp2(tape: Tape, nodes: Mapping[str, Node], prefix: str, x: Node) -> Node:
    h = tape.tanh(tape.affine(x, nodes[f"{prefix}.w1"], nodes[f"{prefix}.b1"]))
    return tape.affine(h, nodes[f"{prefix}.w2"], nodes[f"{prefix}.b2"])


def generate_head_graph(
    tape: Tape,
    enc_nodes: Mapping[str, Node],
    gen_nodes: Mapping[str, Node],
    support_tokens: Sequence[np.ndarray],
    class_slices: Sequence[tuple[int, int]],
    enc_cfg: EncoderConfig,
    gen_cfg: GeneratorConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[Node, Node]:
    """Per-class mean of g_psi over support encodings -> (W (N, d), b (N,))."""
    cls = encode_batch(tape, enc_nodes, support_tokens, enc_cfg, train_mode=train_mode, rng=rng)
    gout = _mlp2(tape, gen_nodes, "g_psi", cls)  # (S, d+1)
    d = gen_cfg.gen_dim
    w_rows, b_rows = [], []
    for lo, hi in class_slices:
        if hi <= lo:
            raise ValueError("empty class in support set")
        m = tape.mean_over_axis(tape.slice(gout, (slice(lo, hi), slice(None))), 0)
        w_rows.append(tape.reshape(tape.slice(m, (slice(0, d),)), (1, d)))
        b_rows.append(tape.slice(m, (slice(d, d + 1),)))
    return tape.concat(w_rows, axis=0), tape.concat(b_rows, axis=0)


def head_logits_graph(
    tape: Tape,
    enc_nodes: Mapping[str, Node],
    gen_nodes: Mapping[str, Node],
    w_node: Node,
    b_node: Node,
    tokens: Sequence[np.ndarray],
    enc_cfg: EncoderConfig,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> Node:
    """softmax-ready logits W h_phi(f(x)) + b for a batch of sequences."""
    cls = encode_batch(tape, enc_nodes, tokens, enc_cfg, train_mode=train_mode, rng=rng)
    h = _mlp2(tape, gen_nodes, "h_phi", cls)  # (B, d)
    return tape.add(tape.matmul(h, tape.transpose(w_node, (1, 0))), b_node)


# -------------------------------------------------------- forward-only wrappers


def generate_softmax(
    model: MetaModel, support_by_class: Sequence[Sequence[np.ndarray]]
) -> tuple[np.ndarray, np.ndarray]:
    """Task head from support examples grouped by class (eval mode)."""
    flat, slices = _flatten_classes(support_by_class)
    tape = Tape()
    enc_nodes = {e.name: tape.const(e.value) for e in model.enc.entries}
    gen_nodes = {e.name: tape.const(e.value) for e in model.gen.entries}
    w_node, b_node = generate_head_graph(
        tape, enc_nodes, gen_nodes, flat, slices, model.enc_cfg, model.gen_cfg, False, None
    )
    return w_node.value.copy(), b_node.value.copy()


def predict(
    model: MetaModel, w: np.ndarray, b: np.ndarray, tokens: np.ndarray
) -> np.ndarray:
    """Class probabilities for one token sequence under head (w, b)."""
    if w.ndim != 2 or w.shape[1] != model.gen_cfg.gen_dim or b.shape != (w.shape[0],):
        raise ValueError(
            f"head shapes {w.shape}/{b.shape} inconsistent with gen_dim {model.gen_cfg.gen_dim}"
        )
    tape = Tape()
    enc_nodes = {e.name: tape.const(e.value) for e in model.enc.entries}
    gen_nodes = {e.name: tape.const(e.value) for e in model.gen.entries}
    logits = head_logits_graph(
        tape,
        enc_nodes,
        gen_nodes,
        tape.const(w),
        tape.const(b),
        [np.asarray(tokens)],
        model.enc_cfg,
        False,
        None,
    )
    return tape.softmax(logits).value[0]


def _flatten_classes(
    by_class: Sequence[Sequence[np.ndarray]],
) -> tuple[list[np.ndarray], list[tuple[int, int]]]:
    flat: list[np.ndarray] = []
    slices = []
    for examples in by_class:
        lo = len(flat)
        flat.extend(examples)
        slices.append((lo, len(flat)))
    return flat, slices


# ------------------------------------------------------------- inner adaptation


@dataclass
class AdaptedState:
    """Task-specific fast weights (non-warp encoder + h_phi + generated head)."""

    fast: dict[str, np.ndarray]
    step: int = 0
    max_steps: int | None = None


LossBuilder = Callable[[Tape, Mapping[str, Node]], Node]


def adapt_step(
    state: AdaptedState,
    loss_builder: LossBuilder,
    group_of: Callable[[str], str],
    alphas: Mapping[str, float],
) -> tuple[AdaptedState, dict[str, np.ndarray], float]:
    """One SGD step on the fast weights; returns (new state, grads, loss).

    loss_builder receives leaf nodes for every fast weight and may close over
    whatever frozen context (warp parameters, inputs) it needs.
    """
    if state.max_steps is not None and state.step >= state.max_steps:
        raise ValueError(f"inner loop already ran {state.step} steps")
    tape = Tape()
    nodes = {name: tape.leaf(value) for name, value in state.fast.items()}
    loss = loss_builder(tape, nodes)
    loss_val = float(loss.value)
    if not math.isfinite(loss_val):
        raise NumericalError(f"non-finite inner loss {loss_val} at step {state.step}")
    grads = backward(tape, loss)
    new_fast = {}
    grad_by_name = {}
    for name, node in nodes.items():
        g = grads[node]
        grad_by_name[name] = g
        new_fast[name] = state.fast[name] - alphas[group_of(name)] * g
    return AdaptedState(new_fast, state.step + 1, state.max_steps), grad_by_name, loss_val


def inner_adapt(
    state: AdaptedState,
    model: MetaModel,
    batch_tokens: Sequence[np.ndarray],
    batch_labels: np.ndarray,
    lrs: LearningRates | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[AdaptedState, dict[str, np.ndarray], float]:
    """One inner step of the episode loss; warp parameters are read from the
    model and never written."""
    lrs = lrs or model.lrs
    warp = {name: model.enc[name].value for name in model.enc.warp_names()}

    def build(tape: Tape, nodes: Mapping[str, Node]) -> Node:
        ctx = dict(nodes)
        for name, value in warp.items():
            ctx[name] = tape.const(value)
        logits = head_logits_graph(
            tape,
            ctx,
            ctx,
            ctx["softmax.W"],
            ctx["softmax.b"],
            batch_tokens,
            model.enc_cfg,
            train_mode,
            rng,
        )
        return tape.cross_entropy(logits, batch_labels)

    return adapt_step(state, build, model.fast_group_of, lrs.alphas)


def make_fast_weights(model: MetaModel, w: np.ndarray, b: np.ndarray, g_steps: int | None = None) -> AdaptedState:
    fast = {name: model.enc[name].value.copy() for name in model.enc.adaptable_names()}
    for e in model.gen.entries:
        if e.inner_adaptable:
            fast[e.name] = e.value.copy()
    fast["softmax.W"] = np.asarray(w, dtype=np.float64).copy()
    fast["softmax.b"] = np.asarray(b, dtype=np.float64).copy()
    return AdaptedState(fast, 0, g_steps)


# ---------------------------------------------------- first-order accumulation


@dataclass
class FirstOrderResult:
    state: AdaptedState
    v_sum: dict[str, np.ndarray]  # per-leaf sums of validation gradients
    q_alpha: dict[str, float]
    inner_losses: list[float]
    val_losses: list[float]


def first_order_adapt(
    state: AdaptedState,
    inner_builder_for_step: Callable[[int], LossBuilder],
    val_builder: LossBuilder,
    frozen: Mapping[str, np.ndarray],
    group_of: Callable[[str], str],
    alphas: Mapping[str, float],
    g_steps: int,
) -> FirstOrderResult:
    """G inner steps with per-step validation-gradient accumulation.

    After each step the validation loss is rebuilt at the adapted weights and
    differentiated with respect to every fast weight and every frozen context
    tensor (leaves on the validation tape only). v_sum collects those
    gradients; under the constant-adaptation-path rule, v_sum over a fast
    weight IS the outer gradient of its initial value, and q_alpha[g]
    accumulates <v_s, -sum_{j<=s} g_j> per group, the outer gradient of
    alpha_g.
    """
    grad_sums: dict[str, np.ndarray] = {}
    v_sum: dict[str, np.ndarray] = {}
    q_alpha: dict[str, float] = {}
    inner_losses: list[float] = []
    val_losses: list[float] = []

    for s in range(g_steps):
        state, grads, loss = adapt_step(state, inner_builder_for_step(s), group_of, alphas)
        inner_losses.append(loss)
        for name, g in grads.items():
            if name in grad_sums:
                grad_sums[name] += g
            else:
                grad_sums[name] = g.copy()

        vt = Tape()
        nodes = {name: vt.leaf(value) for name, value in state.fast.items()}
        nodes.update({name: vt.leaf(value) for name, value in frozen.items()})
        vloss = val_builder(vt, nodes)
        vval = float(vloss.value)
        if not math.isfinite(vval):
            raise NumericalError(f"non-finite validation loss {vval} at inner step {s}")
        val_losses.append(vval)
        vgrads = backward(vt, vloss)
        for name, node in nodes.items():
            vg = vgrads[node]
            if name in v_sum:
                v_sum[name] += vg
            else:
                v_sum[name] = vg.copy()
            if name in state.fast:
                group = group_of(name)
                q_alpha[group] = q_alpha.get(group, 0.0) + float(np.vdot(vg, -grad_sums[name]))
    return FirstOrderResult(state, v_sum, q_alpha, inner_losses, val_losses)


# ------------------------------------------------------------------ episode run


@dataclass
class EpisodeStats:
    provenance: str
    inner_losses: list[float]
    val_loss: float
    val_acc: float


class _BatchCycler:
    """Cycles minibatches over a shuffled index set, reshuffling on wrap."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return out


def run_meta_episode(
    model: MetaModel,
    episode: Episode,
    g_steps: int,
    inner_batch_size: int,
    rng: np.random.Generator,
    train_mode: bool = True,
) -> tuple[dict[str, np.ndarray], dict[str, float], EpisodeStats]:
    """First-order gradient accumulation q for one episode.

    Returns (q over Theta tensors by name, q over alphas by group, stats).
    q is a plain sum over the G per-step validation gradients; the caller
    divides by G, per the outer update rule.
    """
    sup_by_class, _ = episode.tokens_by_class()
    flat_support, class_slices = _flatten_classes(sup_by_class)

    # generation graph: kept alive, backward runs once with summed cotangents
    gen_tape = Tape()
    enc_leaves = {e.name: gen_tape.leaf(e.value) for e in model.enc.entries}
    gpsi_leaves = {
        e.name: gen_tape.leaf(e.value) for e in model.gen.entries if e.group == GPSI_GROUP
    }
    w_node, b_node = generate_head_graph(
        gen_tape,
        enc_leaves,
        gpsi_leaves,
        flat_support,
        class_slices,
        model.enc_cfg,
        model.gen_cfg,
        train_mode,
        rng,
    )

    state = make_fast_weights(model, w_node.value, b_node.value, g_steps)
    warp_values = {name: model.enc[name].value for name in model.enc.warp_names()}
    cycler = _BatchCycler(len(episode.support_tokens), inner_batch_size, rng)
    val_logits: list[np.ndarray] = []

    def inner_builder_for_step(s: int) -> LossBuilder:
        idx = cycler.next()
        batch_tokens = [episode.support_tokens[i] for i in idx]
        batch_labels = episode.support_labels[idx]

        def build(tape: Tape, nodes: Mapping[str, Node]) -> Node:
            ctx = dict(nodes)
            for name, value in warp_values.items():
                ctx[name] = tape.const(value)
            logits = head_logits_graph(
                tape, ctx, ctx, ctx["softmax.W"], ctx["softmax.b"],
                batch_tokens, model.enc_cfg, train_mode, rng,
            )
            return tape.cross_entropy(logits, batch_labels)

        return build

    def val_builder(tape: Tape, nodes: Mapping[str, Node]) -> Node:
        logits = head_logits_graph(
            tape, nodes, nodes, nodes["softmax.W"], nodes["softmax.b"],
            episode.query_tokens, model.enc_cfg, train_mode, rng,
        )
        val_logits.append(logits.value)
        return tape.cross_entropy(logits, episode.query_labels)

    result = first_order_adapt(
        state, inner_builder_for_step, val_builder, warp_values,
        model.fast_group_of, model.lrs.alphas, g_steps,
    )

    # route the summed validation gradients onto Theta: identity Jacobian for
    # the adapted tensors, generation graph for (W, b), h_phi init excluded
    q: dict[str, np.ndarray] = {}
    for name, vg in result.v_sum.items():
        if name in ("softmax.W", "softmax.b") or name.startswith("h_phi."):
            continue
        q[name] = vg
    gen_grads = backward_from(
        gen_tape,
        [(w_node, result.v_sum["softmax.W"]), (b_node, result.v_sum["softmax.b"])],
    )
    for name, leaf in enc_leaves.items():
        q[name] = q[name] + gen_grads[leaf] if name in q else gen_grads[leaf].copy()
    for name, leaf in gpsi_leaves.items():
        q[name] = gen_grads[leaf].copy()

    q_alpha = {g: result.q_alpha.get(g, 0.0) for g in model.alpha_group_names()}
    val_acc = float(np.mean(np.argmax(val_logits[-1], axis=1) == episode.query_labels))
    stats = EpisodeStats(
        episode.provenance,
        result.inner_losses,
        float(np.mean(result.val_losses)),
        val_acc,
    )
    return q, q_alpha, stats


# ----------------------------------------------------------------- outer loop


@dataclass
class MetaTrainConfig:
    n_episodes: int
    tasks_per_batch: int = 4
    adaptation_steps: int = 7
    outer_lr: float = 0.01  # desk-scale SGD rate; reference setup used 1e-5 at BERT scale
    inner_batch_size: int = 16
    epochs: int = 1
    warmup_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.adaptation_steps < 1:
            raise ValueError("adaptation_steps must be >= 1")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")


def apply_outer_update(
    model: MetaModel,
    q_sum: dict[str, np.ndarray],
    q_alpha_sum: dict[str, float],
    beta: float,
    g_steps: int,
) -> MetaModel:
    """Theta <- Theta - beta * sum_T q_T / G, including the alphas."""
    new = model.copy()
    for e in new.enc.entries:
        g = q_sum.get(e.name)
        if g is not None:
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite outer gradient for {e.name}")
            e.value -= beta * g / g_steps
    for e in new.gen.entries:
        if e.group == GPSI_GROUP:
            g = q_sum.get(e.name)
            if g is not None:
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite outer gradient for {e.name}")
                e.value -= beta * g / g_steps
    for group, g in q_alpha_sum.items():
        if not math.isfinite(g):
            raise NumericalError(f"non-finite outer gradient for alpha[{group}]")
        new.lrs.alphas[group] -= beta * g / g_steps
    return new


def warmup_scale(step: int, total_steps: int, warmup_frac: float) -> float:
    warm = max(1, int(round(warmup_frac * total_steps)))
    return min(1.0, (step + 1) / warm)


def meta_train(
    model: MetaModel,
    cfg: MetaTrainConfig,
    sampler: EpisodeSampler | None = None,
    episodes: Sequence[Episode] | None = None,
    log_path=None,
    progress: Callable[[int, EpisodeStats], None] | None = None,
) -> tuple[MetaModel, list[dict]]:
    """Run the outer loop over n_episodes * epochs episodes.

    Episodes come from the seeded sampler (online) or a fixed list replayed
    in order (offline). Episodes that fail to sample are skipped and logged.
    Returns the trained model and the per-episode log rows.
    """
    if (sampler is None) == (episodes is None):
        raise ValueError("provide exactly one episode source")
    model = model.copy()
    model.lrs.outer_lr = cfg.outer_lr
    total_episodes = cfg.n_episodes * cfg.epochs
    total_steps = max(1, total_episodes // cfg.tasks_per_batch)
    alpha_groups = model.alpha_group_names()
    rows: list[dict] = []

    ep_idx = 0
    for step in range(total_steps):
        beta = model.lrs.outer_lr * warmup_scale(step, total_steps, cfg.warmup_frac)
        q_sum: dict[str, np.ndarray] = {}
        qa_sum: dict[str, float] = {g: 0.0 for g in alpha_groups}
        for _ in range(cfg.tasks_per_batch):
            if episodes is not None:
                episode = episodes[ep_idx % len(episodes)]
            else:
                try:
                    episode = sampler.sample_hybrid(episode_rng(cfg.seed, ep_idx))
                except TaskSamplingError as e:
                    rows.append(
                        {"step": step, "provenance": f"skipped:{e}", "inner_losses": "",
                         "val_loss": "", "val_acc": "",
                         **{f"alpha_{g}": model.lrs.alphas[g] for g in alpha_groups}}
                    )
                    ep_idx += 1
                    continue
            drop_rng = episode_rng(cfg.seed, ep_idx, stream=1)
            q, qa, stats = run_meta_episode(
                model, episode, cfg.adaptation_steps, cfg.inner_batch_size, drop_rng
            )
            for name, g in q.items():
                if name in q_sum:
                    q_sum[name] += g
                else:
                    q_sum[name] = g
            for g_name, val in qa.items():
                qa_sum[g_name] += val
            row = {
                "step": step,
                "provenance": stats.provenance,
                "inner_losses": ";".join(f"{x:.6f}" for x in stats.inner_losses),
                "val_loss": f"{stats.val_loss:.6f}",
                "val_acc": f"{stats.val_acc:.4f}",
            }
            for g_name in alpha_groups:
                row[f"alpha_{g_name}"] = model.lrs.alphas[g_name]
            rows.append(row)
            if progress is not None:
                progress(ep_idx, stats)
            ep_idx += 1
        if q_sum or any(qa_sum.values()):
            model = apply_outer_update(model, q_sum, qa_sum, beta, cfg.adaptation_steps)

    if log_path is not None:
        write_training_log(log_path, rows, alpha_groups)
    return model, rows


def write_training_log(path, rows: list[dict], alpha_groups: list[str]) -> None:
    cols = LOG_FIXED_COLUMNS + [f"alpha_{g}" for g in alpha_groups]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
