"""Central finite-difference verification of tape gradients.

The checker perturbs every element of every leaf by +/-h, evaluates the graph
twice, and compares the central difference against the analytic gradient with
the relative-error metric max |analytic - fd| / (|fd| + 1e-8). The forward
evaluations never touch the backward code path, so the check is an
independent oracle for it.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, backward

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4

# build(tape, {name: Node}) -> scalar loss Node
GraphBuilder = Callable[[Tape, dict], "object"]


def _eval_loss(build: GraphBuilder, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    nodes = {name: tape.leaf(arr) for name, arr in params.items()}
    loss = build(tape, nodes)
    return float(loss.value)


def max_rel_error(
    build: GraphBuilder,
    params: dict[str, np.ndarray],
    h: float = DEFAULT_H,
    retry_h: float = 1e-3,
    retry_threshold: float = DEFAULT_TOL,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Elements whose error at step h exceeds retry_threshold are re-measured at
    the larger retry_h and scored with the smaller of the two errors. This
    resolves structurally zero gradients (e.g. shift-invariant directions),
    where the h-sized difference is pure cancellation noise above the 1e-8
    denominator floor; a wrong analytic gradient fails at both step sizes.
    """

    tape = Tape()
    nodes = {name: tape.leaf(arr) for name, arr in params.items()}
    loss = build(tape, nodes)
    grads = backward(tape, loss)
    analytic = {name: grads[node] for name, node in nodes.items()}

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = _eval_loss(build, params)
        flat[i] = orig - step
        f_minus = _eval_loss(build, params)
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * step)

    worst = 0.0
    for name, arr in params.items():
        flat = arr.ravel()
        a_flat = analytic[name].ravel()
        for i in range(flat.size):
            fd = central(flat, i, h)
            err = abs(a_flat[i] - fd) / (abs(fd) + 1e-8)
            if err > retry_threshold:
                fd2 = central(flat, i, retry_h)
                err = min(err, abs(a_flat[i] - fd2) / (abs(fd2) + 1e-8))
            worst = max(worst, err)
    return worst


def primitive_checks(seed: int = 0) -> list[tuple[str, GraphBuilder, dict[str, np.ndarray]]]:
    """One scalar-valued graph per autodiff primitive, on small random tensors."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    checks = []

    def probe_builder(op):
        # fixed random probe reduces the op output to a scalar
        state = {}

        def build(tape, nodes):
            out = op(tape, nodes)
            if "probe" not in state:
                state["probe"] = np.random.default_rng(seed + 1).standard_normal(out.value.shape)
            probe = tape.const(state["probe"])
            flat = tape.reshape(tape.mul(out, probe), (1, -1))
            return tape.reshape(tape.sum_over_axis(flat, 1), ())

        return build

    checks.append(
        ("matmul", probe_builder(lambda t, n: t.matmul(n["a"], n["b"])), {"a": r(3, 4), "b": r(4, 5)})
    )
    checks.append(
        (
            "matmul_batched",
            probe_builder(lambda t, n: t.matmul(n["a"], n["b"])),
            {"a": r(2, 3, 4), "b": r(4, 5)},
        )
    )
    checks.append(
        ("add", probe_builder(lambda t, n: t.add(n["a"], n["b"])), {"a": r(3, 4), "b": r(4)})
    )
    checks.append(
        ("mul", probe_builder(lambda t, n: t.mul(n["a"], n["b"])), {"a": r(2, 3), "b": r(2, 3)})
    )
    checks.append(("scale", probe_builder(lambda t, n: t.scale(n["a"], -1.7)), {"a": r(3, 3)}))
    checks.append(
        (
            "concat",
            probe_builder(lambda t, n: t.concat([n["a"], n["b"]], axis=0)),
            {"a": r(2, 3), "b": r(4, 3)},
        )
    )
    checks.append(
        (
            "slice",
            probe_builder(lambda t, n: t.slice(n["a"], (slice(1, 3), slice(0, 2)))),
            {"a": r(4, 3)},
        )
    )
    checks.append(
        ("mean_over_axis", probe_builder(lambda t, n: t.mean_over_axis(n["a"], 0)), {"a": r(5, 3)})
    )
    checks.append(("softmax", probe_builder(lambda t, n: t.softmax(n["a"])), {"a": r(3, 5)}))
    checks.append(
        ("log_softmax", probe_builder(lambda t, n: t.log_softmax(n["a"])), {"a": r(3, 5)})
    )
    labels = np.array([1, 0, 3, 2])
    checks.append(
        ("cross_entropy", lambda t, n: t.cross_entropy(n["logits"], labels), {"logits": r(4, 4)})
    )
    checks.append(
        (
            "layer_norm",
            probe_builder(lambda t, n: t.layer_norm(n["x"], n["gain"], n["bias"])),
            {"x": r(3, 6), "gain": 1.0 + 0.1 * r(6), "bias": 0.1 * r(6)},
        )
    )
    checks.append(("tanh", probe_builder(lambda t, n: t.tanh(n["a"])), {"a": r(3, 4)}))
    checks.append(("gelu", probe_builder(lambda t, n: t.gelu(n["a"])), {"a": r(3, 4)}))
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    checks.append(
        (
            "embedding_lookup",
            probe_builder(lambda t, n: t.embedding_lookup(n["table"], ids)),
            {"table": r(5, 4)},
        )
    )
    mask = np.array([[True, False, False], [False, True, False]])
    checks.append(
        (
            "masked_fill",
            probe_builder(lambda t, n: t.masked_fill(n["a"], mask, -3.0)),
            {"a": r(2, 3)},
        )
    )
    return checks


def randomize_tree(entries, rng: np.random.Generator, scale: float = 0.4) -> dict[str, np.ndarray]:
    """Parameter values at O(1) scale for well-conditioned difference checks.

    Production-scale init (std 0.02) leaves some gradient elements near the
    float64 central-difference noise floor; the checker is validating the
    backward code, so it runs at a scale where round-off is negligible.
    """
    out = {}
    for e in entries:
        if e.name.endswith(".gain"):
            out[e.name] = 1.0 + 0.2 * rng.standard_normal(e.value.shape)
        else:
            out[e.name] = scale * rng.standard_normal(e.value.shape)
    return out


def composed_checks(seed: int = 7) -> list[tuple[str, GraphBuilder, dict[str, np.ndarray]]]:
    """Composed graphs: a 3-layer MLP, one attention block, and the full
    support-conditioned head-generation -> prediction path."""
    from . import encoder as enc
    from . import meta

    rng = np.random.default_rng(seed)
    checks = []

    # 3-layer tanh MLP ending in cross-entropy
    dims = [5, 7, 6, 4]
    mlp_params = {}
    for i in range(3):
        mlp_params[f"w{i}"] = 0.5 * rng.standard_normal((dims[i], dims[i + 1]))
        mlp_params[f"b{i}"] = 0.1 * rng.standard_normal(dims[i + 1])
    x_in = rng.standard_normal((3, 5))
    y_lab = np.array([0, 3, 1])

    def build_mlp(tape, nodes):
        h = tape.const(x_in)
        for i in range(3):
            h = tape.affine(h, nodes[f"w{i}"], nodes[f"b{i}"])
            if i < 2:
                h = tape.tanh(h)
        return tape.cross_entropy(h, y_lab)

    checks.append(("mlp3", build_mlp, mlp_params))

    # single transformer block on a tiny config
    cfg = enc.EncoderConfig(
        vocab_size=12, model_dim=8, ff_dim=16, n_layers=1, n_heads=2, max_seq_len=8, dropout=0.0
    )
    tree = enc.init_params(cfg, seed=seed)
    attn_params = randomize_tree(tree.entries, rng)
    tokens = [[4, 5, 6], [7, 8, 9, 10]]
    probe = np.random.default_rng(seed + 2).standard_normal((2, cfg.model_dim))

    def build_attn(tape, nodes):
        cls = enc.encode_batch(tape, nodes, tokens, cfg, train_mode=False, rng=None)
        flat = tape.reshape(tape.mul(cls, tape.const(probe)), (1, -1))
        return tape.reshape(tape.sum_over_axis(flat, 1), ())

    checks.append(("attention_block", build_attn, attn_params))

    # full path: encode support, generate (W, b), predict query, cross-entropy
    gcfg = meta.GeneratorConfig(model_dim=cfg.model_dim, gen_dim=5)
    gen = meta.init_generator(gcfg, seed=seed + 3)
    full_params = dict(attn_params)
    full_params.update(randomize_tree(gen.entries, rng))
    support = [[4, 5], [5, 6], [7, 8], [9, 10]]
    class_slices = [(0, 2), (2, 4)]
    query = [[4, 6, 8], [9, 7]]
    q_labels = np.array([0, 1])

    def build_full(tape, nodes):
        w_node, b_node = meta.generate_head_graph(
            tape, nodes, nodes, support, class_slices, cfg, gcfg, train_mode=False, rng=None
        )
        logits = meta.head_logits_graph(
            tape, nodes, nodes, w_node, b_node, query, cfg, train_mode=False, rng=None
        )
        return tape.cross_entropy(logits, q_labels)

    checks.append(("generate_predict_path", build_full, full_params))
    return checks


def run_gradcheck(include_composed: bool = True, h: float = DEFAULT_H, tol: float = DEFAULT_TOL):
    """Run the whole suite; returns [(name, max_rel_err, passed)]."""
    suite = primitive_checks()
    if include_composed:
        suite = suite + composed_checks()
    results = []
    for name, build, params in suite:
        err = max_rel_error(build, params, h=h)
        results.append((name, err, err < tol))
    return results
