"""Corpus ingestion, synthetic nested-corpus generation, and span-level scoring.

Corpus wire format: one JSON record per line with fields ``tokens`` (array of
strings) and ``entities`` (array of ``{start, end, label}``), where start/end
are 1-based and end-inclusive.  Entities may nest and overlap; the label
"None" is reserved for non-entities and never appears in a corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EvalError

NONE_LABEL = "None"


@dataclass(frozen=True)
class Entity:
    start: int  # 1-based
    end: int  # inclusive
    label: str

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class Example:
    tokens: list[str]
    entities: list[Entity] = field(default_factory=list)

    def validate(self) -> None:
        n = len(self.tokens)
        if n == 0:
            raise DataError("field tokens: sentence must contain at least one token")
        seen = set()
        for ent in self.entities:
            if not isinstance(ent.start, int) or not isinstance(ent.end, int):
                raise DataError("field start/end: span bounds must be integers")
            if ent.start < 1:
                raise DataError(f"field start: {ent.start} < 1")
            if ent.end < ent.start:
                raise DataError(f"field end: {ent.end} < start {ent.start}")
            if ent.end > n:
                raise DataError(f"field end: {ent.end} exceeds sentence length {n}")
            if ent.label == NONE_LABEL:
                raise DataError(f"field label: {NONE_LABEL!r} is reserved for non-entities")
            key = (ent.start, ent.end, ent.label)
            if key in seen:
                raise DataError(f"field entities: duplicate entry {key}")
            seen.add(key)


@dataclass(frozen=True)
class PredSpan:
    start: int
    end: int
    label: str
    margin: float = 0.0


@dataclass
class Prediction:
    """Entity predictions for one sentence; never contains the None label."""

    sentence_id: int
    entities: list[PredSpan] = field(default_factory=list)


# ---------------------------------------------------------------------------
# corpus and prediction files
# ---------------------------------------------------------------------------

def load_corpus(path: str) -> list[Example]:
    examples = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                tokens = record["tokens"]
                raw = record.get("entities", [])
                if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                    raise DataError("field tokens: expected an array of strings")
                entities = [Entity(int(e["start"]), int(e["end"]), str(e["label"])) for e in raw]
                ex = Example(tokens, entities)
                ex.validate()
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
            except (DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            examples.append(ex)
    return examples


def save_corpus(path: str, examples: list[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "tokens": ex.tokens,
                "entities": [{"start": e.start, "end": e.end, "label": e.label} for e in ex.entities],
            }
            fh.write(json.dumps(record) + "\n")


def load_predictions(path: str) -> list[Prediction]:
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                spans = [
                    PredSpan(int(e["start"]), int(e["end"]), str(e["label"]), float(e.get("margin", 0.0)))
                    for e in record.get("entities", [])
                ]
                pred = Prediction(int(record["sentence_id"]), spans)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: invalid prediction record ({exc})") from exc
            keys = [(s.start, s.end, s.label) for s in pred.entities]
            if len(set(keys)) != len(keys):
                raise DataError(f"{path}:{lineno}: duplicate predicted spans")
            if any(s.label == NONE_LABEL for s in pred.entities):
                raise DataError(f"{path}:{lineno}: predictions must not carry the None label")
            out.append(pred)
    return out


def save_predictions(path: str, predictions: list[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            record = {
                "sentence_id": pred.sentence_id,
                "entities": [
                    {"start": s.start, "end": s.end, "label": s.label, "margin": round(s.margin, 6)}
                    for s in pred.entities
                ],
            }
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# synthetic nested corpus
# ---------------------------------------------------------------------------

DEFAULT_LABELS = ("org", "person", "place", "device")

_FILLERS = [
    "the", "a", "of", "and", "near", "with", "saw", "met", "took", "from",
] + [f"w{k:02d}" for k in range(24)]


def _markers(label: str) -> tuple[list[str], list[str]]:
    # each label owns characteristic opening/closing words so spans are learnable
    begins = [f"{label}beg{k}" for k in range(3)]
    ends = [f"{label}fin{k}" for k in range(3)]
    return begins, ends


def generate_synthetic(
    seed: int,
    n_sentences: int,
    labels: tuple[str, ...] = DEFAULT_LABELS,
    max_depth: int = 2,
    max_len: int = 18,
    nested_prob: float = 0.45,
) -> list[Example]:
    """Seeded bracketing-grammar corpus with label-specific lexical markers.

    Every entity starts with one of its label's opening markers and ends with
    one of its closing markers; inner material is filler words or, below
    `max_depth`, one nested entity with a different label.  Labels within a
    sentence are distinct, so marker pairing is unambiguous and a model can
    reach F1 = 1.0.  Identical seeds produce identical corpora.
    """
    if max_depth < 1:
        raise DataError(f"max_depth must be >= 1, got {max_depth}")
    if len(labels) < 2:
        raise DataError("need at least 2 labels")
    rng = np.random.default_rng(seed)
    examples = []

    def pick(seq):
        return seq[int(rng.integers(0, len(seq)))]

    def build_entity(label: str, remaining: list[str], depth: int) -> tuple[list[str], list[tuple[int, int, str]]]:
        begins, ends = _markers(label)
        toks = [pick(begins)]
        ents: list[tuple[int, int, str]] = []
        nest = depth < max_depth and remaining and rng.random() < nested_prob
        if nest:
            inner_label = pick(remaining)
            rest = [l for l in remaining if l != inner_label]
            if rng.random() < 0.5:
                toks.append(pick(_FILLERS))
            inner_toks, inner_ents = build_entity(inner_label, rest, depth + 1)
            offset = len(toks)
            toks.extend(inner_toks)
            ents.extend([(s + offset, e + offset, lab) for s, e, lab in inner_ents])
            if rng.random() < 0.5:
                toks.append(pick(_FILLERS))
        else:
            for _ in range(int(rng.integers(1, 4))):
                toks.append(pick(_FILLERS))
        toks.append(pick(ends))
        ents.append((1, len(toks), label))
        return toks, ents

    for _ in range(n_sentences):
        tokens: list[str] = [pick(_FILLERS) for _ in range(int(rng.integers(1, 3)))]
        entities: list[Entity] = []
        n_entities = int(rng.choice([0, 1, 2, 3], p=[0.05, 0.40, 0.40, 0.15]))
        sentence_labels = [str(lab) for lab in rng.permutation(list(labels))]
        for _ in range(n_entities):
            if not sentence_labels:
                break
            label = sentence_labels.pop(0)
            toks, ents = build_entity(label, sentence_labels, 1)
            # nested labels are consumed so no label repeats within the sentence
            used = {lab for _, _, lab in ents}
            sentence_labels = [l for l in sentence_labels if l not in used]
            if len(tokens) + len(toks) + 1 > max_len:
                break
            offset = len(tokens)
            tokens.extend(toks)
            entities.extend(Entity(s + offset, e + offset, lab) for s, e, lab in ents)
            tokens.append(pick(_FILLERS))
        ex = Example(tokens, sorted(entities, key=lambda e: (e.start, e.end, e.label)))
        ex.validate()
        examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# span-level evaluation
# ---------------------------------------------------------------------------

DEFAULT_LENGTH_BUCKETS = (1, 2, 3, 4, 5)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _strictly_contains(outer: Entity, inner: Entity) -> bool:
    return (
        outer.start <= inner.start
        and inner.end <= outer.end
        and (outer.start, outer.end) != (inner.start, inner.end)
    )


def _crosses(a: Entity, b: Entity) -> bool:
    return (a.start < b.start <= a.end < b.end) or (b.start < a.start <= b.end < a.end)


def _is_nested(ent: Entity, others: list[Entity]) -> bool:
    # nested = strict containment in either direction, or a crossing overlap
    for other in others:
        if other is ent:
            continue
        if _strictly_contains(other, ent) or _strictly_contains(ent, other) or _crosses(ent, other):
            return True
    return False


def _any_overlap(ent: Entity, others: list[Entity]) -> bool:
    for other in others:
        if other is ent:
            continue
        if other.start <= ent.end and ent.start <= other.end:
            return True
    return False


@dataclass
class EvalReport:
    """Micro P/R/F1 plus per-label, length-bucket, and flat/nested breakdowns."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_label: dict
    length_buckets: dict
    flat_nested: dict
    gold_total: int
    pred_total: int

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_label": self.per_label,
            "length_buckets": self.length_buckets,
            "flat_nested": self.flat_nested,
            "gold_total": self.gold_total,
            "pred_total": self.pred_total,
        }

    def format_text(self) -> str:
        lines = [
            f"micro  P={self.precision:.4f}  R={self.recall:.4f}  F1={self.f1:.4f}"
            f"  (tp={self.tp} fp={self.fp} fn={self.fn})",
            "per label:",
        ]
        for label, row in sorted(self.per_label.items()):
            lines.append(
                f"  {label:<12} P={row['precision']:.4f} R={row['recall']:.4f} "
                f"F1={row['f1']:.4f} gold={row['gold']}"
            )
        lines.append("by entity length:")
        for bucket, row in self.length_buckets.items():
            lines.append(
                f"  {bucket:<4} gold={row['gold']:<5} P={row['precision']:.4f} "
                f"R={row['recall']:.4f} F1={row['f1']:.4f}"
            )
        fl, ne = self.flat_nested["flat"], self.flat_nested["nested"]
        lines.append(
            f"flat:   gold={fl['gold']:<5} recall={fl['recall']:.4f}\n"
            f"nested: gold={ne['gold']:<5} recall={ne['recall']:.4f} "
            f"(containment-only={self.flat_nested['nested_containment_gold']}, "
            f"any-overlap={self.flat_nested['nested_any_overlap_gold']})"
        )
        return "\n".join(lines)


def _bucket_name(length: int, edges=DEFAULT_LENGTH_BUCKETS) -> str:
    for edge in edges:
        if length <= edge:
            return str(edge)
    return f"{edges[-1] + 1}+"


def evaluate(
    gold: list[Example],
    predictions,
    length_bucket_edges=DEFAULT_LENGTH_BUCKETS,
) -> EvalReport:
    """Score predictions against gold entities with exact-triple matching.

    A predicted (start, end, label) counts as a true positive iff the same
    triple exists in gold for the same sentence.  Both sides use set
    semantics.  The flat/nested split partitions gold entities; an entity is
    nested when another gold entity strictly contains it, it strictly
    contains another, or the two cross.
    """
    pred_by_sid: dict[int, set[tuple[int, int, str]]] = {}
    for pred in predictions:
        sid = pred.sentence_id
        if not 0 <= sid < len(gold):
            raise EvalError(f"prediction references unknown sentence id {sid}")
        triples = {(s.start, s.end, s.label) for s in pred.entities}
        pred_by_sid.setdefault(sid, set()).update(triples)

    bucket_names = [str(e) for e in length_bucket_edges] + [f"{length_bucket_edges[-1] + 1}+"]
    labels_seen = sorted(
        {e.label for ex in gold for e in ex.entities}
        | {t[2] for triples in pred_by_sid.values() for t in triples}
    )
    per_label = {lab: {"tp": 0, "fp": 0, "fn": 0, "gold": 0} for lab in labels_seen}
    buckets = {name: {"tp": 0, "fp": 0, "fn": 0, "gold": 0} for name in bucket_names}
    flat = {"tp": 0, "fn": 0, "gold": 0}
    nested = {"tp": 0, "fn": 0, "gold": 0}
    nested_containment = 0
    nested_any_overlap = 0
    tp = fp = fn = 0

    for sid, ex in enumerate(gold):
        gold_triples = {(e.start, e.end, e.label) for e in ex.entities}
        pred_triples = pred_by_sid.get(sid, set())
        for triple in pred_triples:
            length = triple[1] - triple[0] + 1
            hit = triple in gold_triples
            if hit:
                tp += 1
                per_label[triple[2]]["tp"] += 1
                buckets[_bucket_name(length, length_bucket_edges)]["tp"] += 1
            else:
                fp += 1
                per_label[triple[2]]["fp"] += 1
                buckets[_bucket_name(length, length_bucket_edges)]["fp"] += 1
        for ent in ex.entities:
            triple = (ent.start, ent.end, ent.label)
            found = triple in pred_triples
            per_label[ent.label]["gold"] += 1
            bucket = buckets[_bucket_name(ent.length, length_bucket_edges)]
            bucket["gold"] += 1
            group = nested if _is_nested(ent, ex.entities) else flat
            group["gold"] += 1
            contains = any(
                o is not ent and (_strictly_contains(o, ent) or _strictly_contains(ent, o))
                for o in ex.entities
            )
            if contains:
                nested_containment += 1
            if _any_overlap(ent, ex.entities):
                nested_any_overlap += 1
            if found:
                group["tp"] += 1
            else:
                fn += 1
                per_label[ent.label]["fn"] += 1
                bucket["fn"] += 1
                group["fn"] += 1

    precision, recall, f1 = _prf(tp, fp, fn)
    per_label_out = {}
    for lab, row in per_label.items():
        p, r, f = _prf(row["tp"], row["fp"], row["fn"])
        per_label_out[lab] = {**row, "precision": p, "recall": r, "f1": f}
    buckets_out = {}
    for name, row in buckets.items():
        p, r, f = _prf(row["tp"], row["fp"], row["fn"])
        buckets_out[name] = {**row, "precision": p, "recall": r, "f1": f}
    flat_nested = {
        "flat": {**flat, "recall": flat["tp"] / flat["gold"] if flat["gold"] else 0.0},
        "nested": {**nested, "recall": nested["tp"] / nested["gold"] if nested["gold"] else 0.0},
        "nested_containment_gold": nested_containment,
        "nested_any_overlap_gold": nested_any_overlap,
    }
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        per_label=per_label_out,
        length_buckets=buckets_out,
        flat_nested=flat_nested,
        gold_total=tp + fn,
        pred_total=tp + fp,
    )


def span_recall_at_m(gold: list[Example], per_sentence_logits: list, m: int) -> float:
    """Fraction of distinct gold entity spans kept by top-m filtering.

    `per_sentence_logits` aligns with `gold`: one (spans, logits) pair per
    sentence, where spans is the enumerated (i, j) list and logits the
    matching (count, labels) array of intermediate scores.
    """
    from .pipeline import select_top_m  # local import to avoid a module cycle

    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if len(per_sentence_logits) != len(gold):
        raise EvalError(
            f"got logits for {len(per_sentence_logits)} sentences, corpus has {len(gold)}"
        )
    total = kept = 0
    for ex, (spans, logits) in zip(gold, per_sentence_logits):
        gold_spans = {(e.start, e.end) for e in ex.entities}
        if not gold_spans:
            continue
        retained = set(select_top_m(spans, logits, m))
        total += len(gold_spans)
        kept += len(gold_spans & retained)
    return kept / total if total else 1.0
