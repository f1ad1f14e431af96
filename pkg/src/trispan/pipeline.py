"""End-to-end span classification: enumeration, two-stage scoring, training.

The full model (setting "h") scores every enumerated span with the
intermediate triaffine stage, keeps the top-m spans by their best non-None
logit, runs cross-span attention and scoring over the retained set, and
trains both stages jointly.  Settings "a" through "g" are ablation variants
that score (and predict) with the intermediate stage only.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from .data_eval import Example, NONE_LABEL, PredSpan, Prediction, evaluate
from .encoder import EncoderParams, Vocab, encode, init_encoder
from .errors import ConfigError, DataError, NumericError
from .tensor import (
    MlpParams,
    Tape,
    Tensor,
    add,
    broadcast_to,
    cross_entropy_rows,
    dropout,
    einsum,
    gather_rows,
    init_mlp,
    masked_softmax,
    mlp_apply,
    reshape,
    scale,
)
from .triaffine import (
    ABLATION_SETTINGS,
    SpanTable,
    TriaffineSite,
    attention_table,
    biaffine_table,
    cross_attention_table,
    cross_score_table,
    init_site,
    label_query_scores,
    linear_attention_scores,
    linear_score_table,
    score_table_decomposed,
    span_mask,
)


@dataclass
class ModelConfig:
    """Every train-time knob; flat key=value config files use these field names."""

    d: int = 64  # triaffine width
    m: int = 30  # spans kept for the cross-span stage
    aux_weight: float = 1.0  # weight of the all-spans loss in the joint objective
    init_std: float = 0.01  # stddev for the rank-3 tensors
    max_span_len: int = 0  # 0 = enumerate every span
    setting: str = "h"  # ablation setting a..h
    lr: float = 2e-3
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 8
    seed: int = 1
    emb_dim: int = 64
    hidden: int = 64
    rnn_layers: int = 1
    emb_dropout: float = 0.1
    mlp_dropout: float = 0.1
    activation: str = "relu"
    lr_decay: bool = False
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    share_cross_tensors: bool = False  # reuse token-attention tensors at the cross stage
    force_include_gold: bool = False  # union gold spans into the retained set while training
    max_tokens: int = 64  # truncation length for input sentences

    def validate(self) -> None:
        if self.setting not in ABLATION_SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; expected one of a..h")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.max_span_len < 0 or self.max_tokens < 1:
            raise ConfigError("max_span_len must be >= 0 and max_tokens >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def enumerate_spans(n: int, max_len: int = 0) -> list[tuple[int, int]]:
    """All (i, j), 1-based inclusive, with length capped by max_len (0 = no cap)."""
    if n < 1:
        raise ValueError(f"sentence length must be >= 1, got {n}")
    cap = n if max_len == 0 else min(max_len, n)
    return [(i, j) for i in range(1, n + 1) for j in range(i, min(i + cap, n + 1))]


def select_top_m(spans: list[tuple[int, int]], logits: np.ndarray, m: int) -> list[tuple[int, int]]:
    """Keep the m spans with the largest best non-None logit.

    The None label sits at column 0 and is excluded from the ranking key.
    Ties break lexicographically by (i, j) ascending; the result is ordered
    by key descending, then (i, j).
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] != len(spans):
        raise ValueError(f"logits {logits.shape} do not align with {len(spans)} spans")
    if logits.shape[1] < 2:
        raise ConfigError("ranking needs at least one non-None label column")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    keys = logits[:, 1:].max(axis=1)
    order = sorted(range(len(spans)), key=lambda s: (-keys[s], spans[s]))
    return [spans[s] for s in order[: min(m, len(spans))]]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Forward:
    """One sentence's losses plus the span table for analysis."""

    table: SpanTable
    aux_loss: Tensor
    main_loss: Tensor | None
    total: Tensor
    n_tokens: int


class Model:
    """Parameters plus the forward pass for one ablation setting."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, entity_labels: list[str], rng: np.random.Generator):
        cfg.validate()
        if NONE_LABEL in entity_labels:
            raise ConfigError(f"{NONE_LABEL!r} is implicit and cannot be an entity label")
        if not entity_labels:
            raise ConfigError("need at least one entity label")
        self.cfg = cfg
        self.vocab = vocab
        self.labels = [NONE_LABEL] + list(entity_labels)
        self.params: dict[str, Tensor] = {}
        d, n_labels, act = cfg.d, len(self.labels), cfg.activation

        self.encoder = init_encoder(len(vocab), cfg.emb_dim, cfg.hidden, cfg.rnn_layers, rng, cfg.emb_dropout)
        for t in self.encoder.parameters():
            self._register(t)
        self.proj = self._mlp([self.encoder.out_dim, d], rng, "proj")

        s = cfg.setting
        self.att_site = None
        self.att_queries = None
        self.att_linear = None
        self.value_mlp = None
        self.score_site = None
        self.score_linear = None
        self.bi_tensors = None
        self.cross_att_site = None
        self.cross_value_mlp = None
        self.cross_score_site = None

        if s != "a":
            self.value_mlp = self._mlp([d, d], rng, "values")
        if s in "bcfgh":
            att_labels = 1 if s == "c" else n_labels
            self.att_site = self._site(att_labels, d, rng, content_depth=1, name="att")
        elif s == "d":
            self.att_queries = self._tensor(rng.normal(0.0, 0.1, (n_labels, d)), "att.queries")
        elif s == "e":
            self.att_linear = tuple(
                self._tensor(rng.normal(0.0, 0.1, (n_labels, d)), f"att.lin_{part}")
                for part in ("left", "right", "token")
            ) + (self._tensor(np.zeros(n_labels), "att.lin_bias"),)

        if s == "a":
            self.bi_tensors = self._tensor(
                rng.normal(0.0, cfg.init_std, (n_labels, d + 1, d + 1)), "score.bi_tensors"
            )
        elif s == "b":
            # near-unit readout init: a small init starves the attention of gradient
            self.score_linear = (
                self._tensor(rng.normal(0.0, 1.0, (n_labels, d)), "score.rep"),
                self._tensor(np.zeros(n_labels), "score.bias"),
            )
        elif s == "f":
            self.score_linear = tuple(
                self._tensor(rng.normal(0.0, 1.0, (n_labels, d)), f"score.lin_{part}")
                for part in ("left", "right", "rep")
            ) + (self._tensor(np.zeros(n_labels), "score.lin_bias"),)
        else:
            self.score_site = self._site(n_labels, d, rng, content_depth=0, name="score")

        if s == "h":
            if cfg.share_cross_tensors:
                self.cross_att_site = TriaffineSite(
                    tensors=self.att_site.tensors,
                    left=self._mlp([d, d], rng, "cross_att.left"),
                    right=self._mlp([d, d], rng, "cross_att.right"),
                    content=self._mlp([d, d], rng, "cross_att.content"),
                )
            else:
                self.cross_att_site = self._site(n_labels, d, rng, content_depth=1, name="cross_att")
            self.cross_value_mlp = self._mlp([d, d], rng, "cross_values")
            self.cross_score_site = self._site(n_labels, d, rng, content_depth=0, name="cross_score")

    # -- parameter bookkeeping ------------------------------------------------

    def _register(self, t: Tensor) -> Tensor:
        if t.name is None:
            raise ConfigError("model parameters must be named")
        if t.name in self.params:
            if self.params[t.name] is not t:
                raise ConfigError(f"duplicate parameter name {t.name}")
            return t
        self.params[t.name] = t
        return t

    def _tensor(self, data, name: str) -> Tensor:
        return self._register(Tensor(data, requires_grad=True, name=name))

    def _mlp(self, dims, rng, name) -> MlpParams:
        p = init_mlp(dims, rng, self.cfg.activation, name=name)
        for t in p.parameters():
            self._register(t)
        return p

    def _site(self, labels, d, rng, content_depth, name) -> TriaffineSite:
        site = init_site(
            labels, d, rng, self.cfg.init_std,
            boundary_depth=1, content_depth=content_depth,
            activation=self.cfg.activation, name=name,
        )
        for t in site.parameters():
            self._register(t)
        return site

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def label_id(self, label: str) -> int:
        return self.labels.index(label)

    # -- forward ---------------------------------------------------------------

    def token_features(self, ids, train: bool, rng) -> Tensor:
        h = encode(self.encoder, ids, train_mode=train, rng=rng)
        h = mlp_apply(self.proj, h)
        if train and self.cfg.mlp_dropout > 0:
            h = dropout(h, self.cfg.mlp_dropout, rng)
        return h

    def _intermediate(self, hd: Tensor, mask: np.ndarray, train: bool, rng):
        """Dense intermediate logits (n, n, labels) and attention (or None for 'a')."""
        cfg, s = self.cfg, self.cfg.setting
        n = hd.shape[0]
        if s == "a":
            return biaffine_table(self.bi_tensors, hd), None
        values = mlp_apply(self.value_mlp, hd)
        if train and cfg.mlp_dropout > 0:
            values = dropout(values, cfg.mlp_dropout, rng)
        if s in "bfgh":
            alpha = attention_table(self.att_site, hd, mask)
        elif s == "c":
            alpha = attention_table(self.att_site, hd, mask)  # labels axis has extent 1
            alpha = broadcast_to(alpha, (n, n, n, self.n_labels))
        elif s == "d":
            scores = label_query_scores(self.att_queries, hd, n)
            alpha = masked_softmax(scores, np.broadcast_to(mask[..., None], scores.shape), axis=2)
        elif s == "e":
            scores = linear_attention_scores(*self.att_linear, hd)
            alpha = masked_softmax(scores, np.broadcast_to(mask[..., None], scores.shape), axis=2)
        else:  # pragma: no cover - settings are validated up front
            raise ConfigError(f"unknown setting {s!r}")

        if s == "b":
            reps = einsum("ijkr,kd->ijrd", alpha, values)
            w_rep, bias = self.score_linear
            logits = add(einsum("rd,ijrd->ijr", w_rep, reps), reshape(bias, (1, 1, self.n_labels)))
        elif s == "f":
            reps = einsum("ijkr,kd->ijrd", alpha, values)
            logits = linear_score_table(*self.score_linear[:3], self.score_linear[3], hd, reps)
        else:
            logits = score_table_decomposed(self.score_site, hd, alpha, values)
        return logits, (alpha, values)

    def forward(self, example: Example, train: bool = False, rng=None) -> Forward:
        cfg = self.cfg
        if rng is None:
            rng = np.random.default_rng(0)
        tokens = example.tokens[: cfg.max_tokens]
        n = len(tokens)
        ids = self.vocab.ids(tokens)
        gold = {
            (e.start, e.end): self.label_id(e.label)
            for e in example.entities
            if e.end <= n and e.label in self.labels
        }
        hd = self.token_features(ids, train, rng)
        mask = span_mask(n, cfg.max_span_len)
        spans = enumerate_spans(n, cfg.max_span_len)
        flat = np.asarray([(i - 1) * n + (j - 1) for i, j in spans], dtype=np.int64)
        dense, att = self._intermediate(hd, mask, train, rng)
        logits = gather_rows(reshape(dense, (n * n, self.n_labels)), flat)
        gold_ids = np.asarray([gold.get(span, 0) for span in spans], dtype=np.int64)
        aux_loss = cross_entropy_rows(logits, gold_ids)

        table = SpanTable(spans=spans, logits=logits.data.copy())
        if att is not None:
            table.alpha = att[0].data

        if cfg.setting != "h":
            return Forward(table, aux_loss, None, aux_loss, n)

        retained = select_top_m(spans, logits.data, cfg.m)
        if train and cfg.force_include_gold:
            retained = retained + [sp for sp in gold if sp not in retained]
        alpha, values = att
        left_idx = np.asarray([i - 1 for i, _ in retained], dtype=np.int64)
        right_idx = np.asarray([j - 1 for _, j in retained], dtype=np.int64)
        flat_ret = left_idx * n + right_idx
        alpha_ret = gather_rows(reshape(alpha, (n * n, n, self.n_labels)), flat_ret)
        span_reps = einsum("lkr,kd->lrd", alpha_ret, values)
        beta = cross_attention_table(self.cross_att_site, hd, span_reps, left_idx, right_idx)
        cross_values = mlp_apply(self.cross_value_mlp, span_reps)
        if train and cfg.mlp_dropout > 0:
            cross_values = dropout(cross_values, cfg.mlp_dropout, rng)
        cross_logits = cross_score_table(
            self.cross_score_site, hd, beta, cross_values, left_idx, right_idx
        )
        gold_ret = np.asarray([gold.get(span, 0) for span in retained], dtype=np.int64)
        main_loss = cross_entropy_rows(cross_logits, gold_ret)
        total = add(scale(aux_loss, cfg.aux_weight), main_loss)

        table.retained = retained
        table.beta = beta.data
        table.cross_logits = cross_logits.data.copy()
        return Forward(table, aux_loss, main_loss, total, n)

    # -- inference ---------------------------------------------------------------

    def decode(self, example: Example, sentence_id: int = 0) -> Prediction:
        """Entity predictions: argmax labels, None suppressed, nesting allowed."""
        fwd = self.forward(example, train=False)
        table = fwd.table
        if self.cfg.setting == "h":
            spans, logits = table.retained, table.cross_logits
        else:
            spans, logits = table.spans, table.logits
        out = []
        for span, row in zip(spans, logits):
            best = int(np.argmax(row))
            if best == 0:
                continue
            margin = float(row[best] - np.max(np.delete(row, best)))
            out.append(PredSpan(span[0], span[1], self.labels[best], margin))
        out.sort(key=lambda s: (s.start, s.end, s.label))
        return Prediction(sentence_id, out)

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str) -> None:
        meta = {
            "config": asdict(self.cfg),
            "labels": self.labels[1:],
            "vocab": self.vocab.tokens,
        }
        ckpt.save_archive(path, {name: t.data for name, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path: str) -> "Model":
        arrays, meta = ckpt.load_archive(path)
        cfg = ModelConfig(**meta["config"])
        vocab = Vocab(list(meta["vocab"]))
        model = cls(cfg, vocab, list(meta["labels"]), np.random.default_rng(cfg.seed))
        missing = set(model.params) - set(arrays)
        extra = set(arrays) - set(model.params)
        if missing or extra:
            raise DataError(f"archive mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            if model.params[name].data.shape != arr.shape:
                raise DataError(f"parameter {name} has shape {arr.shape}, expected {model.params[name].shape}")
            model.params[name].data = arr.astype(np.float64)
        return model


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; lr == 0 leaves parameters bit-identical."""

    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in enumerate(self.params):
            g = grads[p]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def clip_gradients(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in grads:
            grads[p] = grads[p] * factor
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    aux_loss: float
    main_loss: float
    total_loss: float
    dev_precision: float
    dev_recall: float
    dev_f1: float

    def tsv(self) -> str:
        return "\t".join(
            f"{v:.6f}" if isinstance(v, float) else str(v)
            for v in (
                self.epoch, self.aux_loss, self.main_loss, self.total_loss,
                self.dev_precision, self.dev_recall, self.dev_f1,
            )
        )


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics]
    checkpoint_path: str | None = None
    best_path: str | None = None
    best_dev_f1: float = float("nan")


def _batches(order: np.ndarray, size: int):
    for k in range(0, len(order), size):
        yield order[k : k + size]


def train(
    cfg: ModelConfig,
    train_examples: list[Example],
    dev_examples: list[Example] | None = None,
    out_dir: str | None = None,
    log=None,
) -> TrainResult:
    """Deterministic training given cfg.seed; logs one metrics row per epoch.

    Writes the final checkpoint (and the best-dev checkpoint when a dev set
    is supplied) under out_dir if given.  Non-finite losses abort with the
    offending sentence named.
    """
    cfg.validate()
    if not train_examples:
        raise DataError("training corpus is empty")
    labels = sorted({e.label for ex in train_examples for e in ex.entities})
    if not labels:
        raise DataError("training corpus contains no entities")
    vocab = Vocab.from_corpus(train_examples)
    model = Model(cfg, vocab, labels, np.random.default_rng(cfg.seed))
    opt = AdamW(model.param_list, cfg.lr, cfg.weight_decay)
    metrics: list[EpochMetrics] = []
    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.tsv")
        with open(metrics_path, "w"):
            pass
    steps_per_epoch = math.ceil(len(train_examples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    best_f1 = -1.0
    best_path = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_examples))
        sums = np.zeros(3)
        count = 0
        for batch in _batches(order, cfg.batch_size):
            acc = {p: np.zeros_like(p.data) for p in model.param_list}
            for si in batch:
                si = int(si)
                ex = train_examples[si]
                rng = np.random.default_rng([cfg.seed, epoch, si])
                try:
                    with Tape() as tape:
                        fwd = model.forward(ex, train=True, rng=rng)
                except NumericError as exc:
                    raise NumericError(f"sentence {si} (epoch {epoch}): {exc}") from exc
                if not np.isfinite(fwd.total.data):
                    raise NumericError(f"non-finite loss at sentence {si} (epoch {epoch})")
                grads = tape.gradients(fwd.total, model.param_list)
                for p in model.param_list:
                    acc[p] += grads[p]
                main = fwd.main_loss.item() if fwd.main_loss is not None else 0.0
                sums += (fwd.aux_loss.item(), main, fwd.total.item())
                count += 1
            for p in acc:
                acc[p] /= len(batch)
            clip_gradients(acc, cfg.grad_clip)
            lr = cfg.lr * (1.0 - step / total_steps) if cfg.lr_decay else cfg.lr
            opt.step(acc, lr=lr)
            step += 1
        dev_p = dev_r = dev_f1 = float("nan")
        if dev_examples is not None:
            preds = [model.decode(ex, sid) for sid, ex in enumerate(dev_examples)]
            report = evaluate(dev_examples, preds)
            dev_p, dev_r, dev_f1 = report.precision, report.recall, report.f1
        row = EpochMetrics(epoch, sums[0] / count, sums[1] / count, sums[2] / count, dev_p, dev_r, dev_f1)
        metrics.append(row)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(row.tsv() + "\n")
        if log:
            log(row.tsv())
        if out_dir and dev_examples is not None and dev_f1 > best_f1:
            best_f1 = dev_f1
            best_path = os.path.join(out_dir, "model_best.npz")
            model.save(best_path)
    final_path = None
    if out_dir:
        final_path = os.path.join(out_dir, "model.npz")
        model.save(final_path)
        vocab.save(os.path.join(out_dir, "vocab.txt"))
    return TrainResult(model, metrics, final_path, best_path, best_f1 if best_f1 >= 0 else float("nan"))
