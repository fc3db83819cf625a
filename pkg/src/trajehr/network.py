"""The differentiable forward pipeline.

Per layer, two parallel streams consume the previous layer's outputs: a
pre-normalization transformer layer over the assembled token sequence
(attention restricted by the chapter mask), and a stack of relation-typed
graph-attention blocks that update the visit nodes of the progression graph
from (a) their visit's diagnosis-token hidden states and (b) their temporal
predecessor plus self-loop. The patient vector concatenates the sequence
summary token with an attention-pooled mix of chapter tokens and visit nodes.

All attention distributions are captured in the returned trace for the
losses, the invariant tests, and the interpretability exporter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assembly import AssembledSequence, TokenKind, assemble
from .autodiff import Tensor
from .cohort import N_AGE_BINS, PatientTrajectory, age_bin
from .errors import GradMismatch, SequenceTooLong, ShapeMismatch, ValidationError
from .graph import ProgressionGraph, build_progression_graph
from .ontology import CODE_TYPES, N_CHAPTERS, Vocabulary

LEAKY_SLOPE = 0.2
FFN_MULT = 4
INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelHyper:
    hidden_dim: int = 64
    n_layers: int = 2
    n_gat_blocks: int = 2
    n_heads: int = 2
    max_visits: int = 10
    max_seq_len: int = 128
    k: int = 3
    task_width: int = 0  # 0 = no task head

    def __post_init__(self):
        if self.hidden_dim < 1 or self.hidden_dim % self.n_heads != 0:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} must be positive and divisible by n_heads {self.n_heads}"
            )
        for name in ("n_layers", "n_gat_blocks", "n_heads", "max_visits", "max_seq_len", "k"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.task_width < 0:
            raise ValidationError("task_width must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def init_params(vocab: Vocabulary, hyper: ModelHyper, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter initialization; dict order defines checkpoint order."""
    rng = np.random.default_rng(seed)
    d = hyper.hidden_dim
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = ad.parameter(rng.normal(0.0, INIT_SCALE, size=shape))

    def zeros(name, shape):
        params[name] = ad.parameter(np.zeros(shape))

    def ones(name, shape):
        params[name] = ad.parameter(np.ones(shape))

    w("embed.code", (len(vocab), d))
    w("embed.type", (len(CODE_TYPES), d))
    w("embed.visit", (hyper.max_visits, d))
    w("embed.age", (N_AGE_BINS, d))
    w("embed.seq", (1, d))
    w("embed.mask", (1, d))
    w("embed.chapter", (N_CHAPTERS, d))

    for l in range(hyper.n_layers):
        ones(f"enc.{l}.ln1.gain", (d,))
        zeros(f"enc.{l}.ln1.bias", (d,))
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"enc.{l}.attn.{proj}", (d, d))
        for proj in ("bq", "bk", "bv", "bo"):
            zeros(f"enc.{l}.attn.{proj}", (d,))
        ones(f"enc.{l}.ln2.gain", (d,))
        zeros(f"enc.{l}.ln2.bias", (d,))
        w(f"enc.{l}.ffn.w1", (d, FFN_MULT * d))
        zeros(f"enc.{l}.ffn.b1", (FFN_MULT * d,))
        w(f"enc.{l}.ffn.w2", (FFN_MULT * d, d))
        zeros(f"enc.{l}.ffn.b2", (d,))

    for l in range(hyper.n_layers):
        for b in range(hyper.n_gat_blocks):
            for rel in ("diag", "temp"):
                w(f"gat.{l}.{b}.{rel}.w", (d, d))
                w(f"gat.{l}.{b}.{rel}.a_dst", (d, 1))
                w(f"gat.{l}.{b}.{rel}.a_src", (d, 1))
            ones(f"gat.{l}.{b}.ln.gain", (d,))
            zeros(f"gat.{l}.{b}.ln.bias", (d,))

    for proj in ("wq", "wk", "wv"):
        w(f"pool.{proj}", (d, d))

    for ct in CODE_TYPES:
        w(f"head.mask.{ct.value}", (2 * d, vocab.size(ct)))
        zeros(f"head.mask.{ct.value}.b", (vocab.size(ct),))
    for side in ("seq", "visit"):
        w(f"head.anc.{side}", (d, N_CHAPTERS))
        zeros(f"head.anc.{side}.b", (N_CHAPTERS,))
    if hyper.task_width > 0:
        w("head.task", (2 * d, hyper.task_width))
        zeros("head.task.b", (hyper.task_width,))
    return params


@dataclass
class ForwardTrace:
    """Everything a single forward pass produced, tensors still on the tape."""

    mode: str
    assembled: AssembledSequence
    graph: ProgressionGraph
    masked: frozenset[str]
    hidden: list[Tensor]                 # H^(0..L), each (S, d)
    visit_feats: list[Tensor]            # V^(0..L), each (T, d)
    sr_attn: list[np.ndarray]            # per layer (n_heads, S, S)
    gat_attn: list[list[dict]]           # [layer][block] -> relation -> {visit t: (src ids, weights)}
    pool_candidates: list[tuple[str, int]]  # ("chapter", j) / ("visit", t), pooling order
    pool_weights: np.ndarray             # (n_candidates,)
    h_seq: Tensor                        # (1, d) summary token at layer L
    h_visit_last: Tensor                 # (1, d) last visit node at layer L
    patient_vector: Tensor               # (1, 2d)
    chapter_block: Tensor | None         # (N_a, d) chapter-token rows of H^L
    logits: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


class Model:
    """Bundles vocabulary, hyperparameters, and the parameter tensors."""

    def __init__(self, vocab: Vocabulary, hyper: ModelHyper, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.vocab = vocab
        self.hyper = hyper
        self.params = params if params is not None else init_params(vocab, hyper, seed)

    # -- embedding ---------------------------------------------------------

    def _embed(self, assembled: AssembledSequence, masked: frozenset[str]) -> Tensor:
        p = self.params
        code_slots = [s for s in assembled.slots if s.kind is TokenKind.CODE]
        gids = np.array([self.vocab.global_id(s.code.identifier) for s in code_slots], dtype=np.intp)
        tids = np.array([CODE_TYPES.index(s.code.code_type) for s in code_slots], dtype=np.intp)
        vids = np.array([s.visit_index - 1 for s in code_slots], dtype=np.intp)

        e_code = ad.gather_rows(p["embed.code"], gids)
        keep = np.array([[0.0] if s.code.identifier in masked else [1.0] for s in code_slots])
        if masked:
            # Masked slots swap the code embedding for the shared mask embedding,
            # keeping type and visit-position context intact.
            e_code = ad.add(ad.mul_const(e_code, keep), ad.mul_const(p["embed.mask"], 1.0 - keep))
        h_codes = ad.add(ad.add(e_code, ad.gather_rows(p["embed.type"], tids)),
                         ad.gather_rows(p["embed.visit"], vids))

        parts = [p["embed.seq"], h_codes]
        if assembled.n_chapter_tokens:
            cids = np.array([j - 1 for j in assembled.chapter_order], dtype=np.intp)
            parts.append(ad.gather_rows(p["embed.chapter"], cids))
        return ad.concat(parts, axis=0)

    # -- transformer layer over the token sequence --------------------------

    def _encoder_layer(self, h_prev: Tensor, additive_mask: np.ndarray, layer: int,
                       sr_attn: list[np.ndarray]) -> Tensor:
        p = self.params
        d = self.hyper.hidden_dim
        n_heads = self.hyper.n_heads
        dh = d // n_heads
        size = h_prev.data.shape[0]
        pre = f"enc.{layer}"

        x = ad.layernorm(h_prev, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])

        def heads(proj, bias):
            y = ad.add(ad.matmul(x, p[f"{pre}.attn.{proj}"]), p[f"{pre}.attn.{bias}"])
            return ad.transpose(ad.reshape(y, (size, n_heads, dh)), (1, 0, 2))

        q = heads("wq", "bq")
        k = heads("wk", "bk")
        v = heads("wv", "bv")
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        attn = ad.masked_softmax(scores, additive_mask[None, :, :])
        sr_attn.append(attn.data.copy())
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (size, d))
        attn_out = ad.add(ad.matmul(ctx, p[f"{pre}.attn.wo"]), p[f"{pre}.attn.bo"])
        h_mid = ad.add(h_prev, attn_out)

        y = ad.layernorm(h_mid, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        ffn = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(y, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"])),
                               p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"])
        return ad.add(h_mid, ffn)

    # -- graph attention over the progression graph -------------------------

    @staticmethod
    def _graph_meta(graph: ProgressionGraph) -> dict:
        """Flat edge arrays per relation: sources, destination segments, slices per visit.

        Edges are emitted in visit order so each destination's edges occupy one
        contiguous slice, which the attention captures reuse.
        """
        diag_slots: list[int] = []
        diag_seg: list[int] = []
        diag_slices: dict[int, slice] = {}
        for t in range(1, graph.n_visits + 1):
            slots = graph.diag_slots(t)
            if slots:
                diag_slices[t] = slice(len(diag_slots), len(diag_slots) + len(slots))
                diag_slots.extend(slots)
                diag_seg.extend([t - 1] * len(slots))
        temp_src: list[int] = []
        temp_seg: list[int] = []
        temp_slices: dict[int, slice] = {}
        for t in range(2, graph.n_visits + 1):
            temp_slices[t] = slice(len(temp_src), len(temp_src) + 2)
            temp_src.extend([t - 2, t - 1])  # predecessor node and the self-loop
            temp_seg.extend([t - 1, t - 1])
        return {
            "diag_slots": np.asarray(diag_slots, dtype=np.intp),
            "diag_seg": np.asarray(diag_seg, dtype=np.intp),
            "diag_slices": diag_slices,
            "temp_src": np.asarray(temp_src, dtype=np.intp),
            "temp_seg": np.asarray(temp_seg, dtype=np.intp),
            "temp_slices": temp_slices,
        }

    def _relation_messages(self, src_rows: Tensor, dst_rows: Tensor, seg_ids: np.ndarray,
                           n_segments: int, prefix: str) -> tuple[Tensor, np.ndarray]:
        """One relation's attention-weighted messages for every destination at once."""
        p = self.params
        wh_src = ad.matmul(src_rows, p[f"{prefix}.w"])
        wh_dst = ad.matmul(dst_rows, p[f"{prefix}.w"])
        scores = ad.add(ad.matmul(wh_src, p[f"{prefix}.a_src"]),
                        ad.gather_rows(ad.matmul(wh_dst, p[f"{prefix}.a_dst"]), seg_ids))
        alpha = ad.segment_softmax(ad.leaky_relu(scores, LEAKY_SLOPE), seg_ids, n_segments)
        messages = ad.scatter_add_rows(ad.mul(alpha, wh_src), seg_ids, n_segments)
        return messages, alpha.data.ravel().copy()

    def _progression_block(self, h_sr_prev: Tensor, visits: Tensor, graph: ProgressionGraph,
                           meta: dict, layer: int, block: int) -> tuple[Tensor, dict]:
        p = self.params
        n_visits = graph.n_visits
        capture = {"diag": {}, "temporal": {}}
        update: Tensor | None = None

        if meta["diag_slots"].size:
            messages, weights = self._relation_messages(
                ad.gather_rows(h_sr_prev, meta["diag_slots"]), visits,
                meta["diag_seg"], n_visits, f"gat.{layer}.{block}.diag",
            )
            for t, sl in meta["diag_slices"].items():
                capture["diag"][t] = (meta["diag_slots"][sl].tolist(), weights[sl])
            update = messages

        if n_visits >= 2:
            messages, weights = self._relation_messages(
                ad.gather_rows(visits, meta["temp_src"]), visits,
                meta["temp_seg"], n_visits, f"gat.{layer}.{block}.temp",
            )
            for t, sl in meta["temp_slices"].items():
                capture["temporal"][t] = ([t - 1, t], weights[sl])
            update = messages if update is None else ad.add(update, messages)

        if update is None:
            update = ad.constant(np.zeros(visits.data.shape))
        new_visits = ad.layernorm(ad.add(update, visits),
                                  p[f"gat.{layer}.{block}.ln.gain"],
                                  p[f"gat.{layer}.{block}.ln.bias"])
        return new_visits, capture

    def _progression_module(self, h_sr_prev: Tensor, visits_prev: Tensor,
                            graph: ProgressionGraph, meta: dict, layer: int) -> tuple[Tensor, list[dict]]:
        visits = visits_prev
        captures = []
        for block in range(self.hyper.n_gat_blocks):
            visits, capture = self._progression_block(h_sr_prev, visits, graph, meta, layer, block)
            captures.append(capture)
        return visits, captures

    # -- pooling and heads ---------------------------------------------------

    def _patient_vector(self, h_last: Tensor, visits_last: Tensor, assembled: AssembledSequence,
                        n_visits: int):
        p = self.params
        d = self.hyper.hidden_dim
        h_seq = ad.row(h_last, 0)
        candidates = []
        descriptors: list[tuple[str, int]] = []
        if assembled.n_chapter_tokens:
            candidates.append(ad.gather_rows(h_last, assembled.chapter_positions()))
            descriptors.extend(("chapter", j) for j in assembled.chapter_order)
        candidates.append(visits_last)
        descriptors.extend(("visit", t) for t in range(1, n_visits + 1))
        cand = candidates[0] if len(candidates) == 1 else ad.concat(candidates, axis=0)

        q = ad.matmul(h_seq, p["pool.wq"])
        keys = ad.matmul(cand, p["pool.wk"])
        values = ad.matmul(cand, p["pool.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(keys)), 1.0 / np.sqrt(d))
        alpha = ad.masked_softmax(scores)
        pooled = ad.matmul(alpha, values)
        return ad.concat([h_seq, pooled], axis=1), descriptors, alpha.data[0].copy(), h_seq

    def _linear_head(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.matmul(x, self.params[name]), self.params[f"{name}.b"])

    # -- full forward --------------------------------------------------------

    def prepare(self, traj: PatientTrajectory, masked: frozenset[str] = frozenset()) -> dict:
        """Input-only preprocessing (assembly, graph, mask, age bins).

        The result depends on the trajectory and the masked-identifier set and
        may be cached across epochs whenever those are unchanged (fine-tuning
        always qualifies: its masked set is empty).
        """
        if traj.n_visits > self.hyper.max_visits:
            raise SequenceTooLong(
                f"patient {traj.patient_id}: {traj.n_visits} visits exceed max_visits {self.hyper.max_visits}"
            )
        assembled = assemble(traj, self.vocab, self.hyper.k, max_len=self.hyper.max_seq_len,
                             exclude_from_trigger=masked or None)
        graph = build_progression_graph(traj, assembled)
        return {
            "assembled": assembled,
            "graph": graph,
            "meta": self._graph_meta(graph),
            "additive_mask": assembled.mask.additive(),
            "age_bins": np.array([age_bin(v.age_years) for v in traj.visits], dtype=np.intp),
            "masked": masked,
        }

    def forward(self, traj: PatientTrajectory, mode: str = "finetune",
                masked: frozenset[str] | set[str] = frozenset(),
                prepared: dict | None = None) -> ForwardTrace:
        if mode not in ("pretrain", "finetune"):
            raise ValidationError(f"mode must be pretrain or finetune, got {mode!r}")
        masked = frozenset(masked)
        if mode == "finetune" and masked:
            raise ValidationError("finetune mode never masks codes")
        if prepared is None:
            prepared = self.prepare(traj, masked)
        elif prepared["masked"] != masked:
            raise ValidationError("prepared inputs were built for a different masked set")
        assembled = prepared["assembled"]
        graph = prepared["graph"]
        meta = prepared["meta"]
        additive_mask = prepared["additive_mask"]

        hidden = [self._embed(assembled, masked)]
        visit_feats = [ad.gather_rows(self.params["embed.age"], prepared["age_bins"])]
        sr_attn: list[np.ndarray] = []
        gat_attn: list[list[dict]] = []

        for layer in range(self.hyper.n_layers):
            h_new = self._encoder_layer(hidden[layer], additive_mask, layer, sr_attn)
            v_new, captures = self._progression_module(hidden[layer], visit_feats[layer], graph, meta, layer)
            hidden.append(h_new)
            visit_feats.append(v_new)
            gat_attn.append(captures)

        h_last, visits_last = hidden[-1], visit_feats[-1]
        patient_vector, descriptors, pool_weights, h_seq = self._patient_vector(
            h_last, visits_last, assembled, traj.n_visits
        )
        h_visit_last = ad.row(visits_last, traj.n_visits - 1)
        chapter_block = (
            ad.gather_rows(h_last, assembled.chapter_positions())
            if assembled.n_chapter_tokens else None
        )

        trace = ForwardTrace(
            mode=mode, assembled=assembled, graph=graph, masked=masked,
            hidden=hidden, visit_feats=visit_feats, sr_attn=sr_attn, gat_attn=gat_attn,
            pool_candidates=descriptors, pool_weights=pool_weights,
            h_seq=h_seq, h_visit_last=h_visit_last, patient_vector=patient_vector,
            chapter_block=chapter_block,
        )
        if mode == "pretrain":
            for ct in CODE_TYPES:
                trace.logits[f"mask.{ct.value}"] = self._linear_head(patient_vector, f"head.mask.{ct.value}")
            trace.logits["anc.seq"] = self._linear_head(h_seq, "head.anc.seq")
            trace.logits["anc.visit"] = self._linear_head(h_visit_last, "head.anc.visit")
        else:
            if "head.task" in self.params:
                trace.logits["task"] = self._linear_head(patient_vector, "head.task")
        return trace

    def task_scores(self, traj: PatientTrajectory) -> np.ndarray:
        """Sigmoid task-head scores for one patient (no gradients kept)."""
        from scipy.special import expit

        trace = self.forward(traj, mode="finetune")
        if "task" not in trace.logits:
            raise ShapeMismatch("model has no task head")
        return expit(trace.logits["task"].data[0])


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    group_errors: dict[str, float]
    epsilon: float
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.group_errors.items() if err >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values()) if self.group_errors else 0.0

    def raise_if_failed(self) -> None:
        if not self.passed:
            worst = {name: self.group_errors[name] for name in self.failures}
            raise GradMismatch(f"gradient mismatch beyond {self.tolerance:g} in groups: {worst}")


def grad_check(params: dict[str, Tensor], loss_closure, epsilon: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_closure`` must rebuild the loss from the current parameter data on
    every call. Per-entry relative error is |a - n| / (|a| + |n| + 1e-6); the
    additive floor keeps FD roundoff on zero-gradient entries from
    registering while leaving real defects (O(1) ratios) visible.
    """
    ad.zero_grads(params)
    loss = loss_closure()
    ad.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    ad.zero_grads(params)

    errors: dict[str, float] = {}
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            hi = float(loss_closure().data)
            flat[i] = keep - epsilon
            lo = float(loss_closure().data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(ga[i] - numeric) / (abs(ga[i]) + abs(numeric) + 1e-6)
            if err > worst:
                worst = err
        errors[name] = worst
    return GradCheckReport(group_errors=errors, epsilon=epsilon, tolerance=tolerance)
