"""Recall@K metrics for ranked relation predictions.

Micro Recall@K is the unweighted mean over images of the fraction of an
image's ground-truth triples found in its top-K ranked candidates; images
without ground-truth triples are excluded. A pooled variant (corpus-level
hit fraction) is available behind a flag.

Macro Recall@K averages, without weighting, the per-predicate recalls: for
each predicate with support > 0, the fraction of its ground-truth triples
(pooled across images) hit by the per-image top-K lists. Class frequency
therefore has no influence on the mean.

K may be a positive integer or the string "effective", which uses each
image's own ground-truth triple count as its K.
"""

from __future__ import annotations

from dataclasses import dataclass

from .data import SceneDataset

Candidate = tuple[int, int, int, float]  # (subject_id, predicate_id, object_id, score)

K_EFFECTIVE = "effective"


@dataclass(frozen=True)
class PredictionSet:
    """Per-image ranked candidates, highest score first, ties pre-broken."""

    per_image: dict[int, tuple[Candidate, ...]]

    def __post_init__(self):
        for image_id, candidates in self.per_image.items():
            scores = [c[3] for c in candidates]
            if any(a < b for a, b in zip(scores, scores[1:])):
                raise ValueError(f"image {image_id}: candidates not sorted by descending score")

    @classmethod
    def from_ranked(cls, per_image: dict[int, list[Candidate]]) -> "PredictionSet":
        return cls({int(k): tuple(v) for k, v in per_image.items()})


@dataclass(frozen=True)
class RecallReport:
    k_values: tuple[object, ...]
    micro: dict[object, float]
    macro: dict[object, float]
    per_predicate: dict[tuple[int, object], float]
    support: dict[int, int]


def _check_k(k) -> None:
    if k == K_EFFECTIVE:
        return
    if not isinstance(k, int) or k < 1:
        raise ValueError(f"K must be a positive integer or '{K_EFFECTIVE}', got {k!r}")


def _gt_triples(gt: SceneDataset) -> dict[int, set[tuple[int, int, int]]]:
    return {
        img.image_id: {(t.subject_id, t.predicate_id, t.object_id) for t in img.triples}
        for img in gt.images
    }


def _top_k(preds: PredictionSet, image_id: int, k, n_gt: int) -> set[tuple[int, int, int]]:
    limit = n_gt if k == K_EFFECTIVE else k
    ranked = preds.per_image.get(image_id, ())
    return {(s, p, o) for s, p, o, _ in ranked[:limit]}


def micro_recall_at_k(preds: PredictionSet, gt: SceneDataset, k, pooled: bool = False) -> float:
    """Mean per-image recall of ground-truth triples in the top-K lists.

    pooled=True returns the corpus-level hit fraction instead of the
    per-image mean.
    """
    _check_k(k)
    gt_sets = _gt_triples(gt)
    recalls: list[float] = []
    hits = 0
    total = 0
    for image_id, triples in gt_sets.items():
        if not triples:
            continue
        found = len(_top_k(preds, image_id, k, len(triples)) & triples)
        recalls.append(found / len(triples))
        hits += found
        total += len(triples)
    if not recalls:
        raise ValueError("no image in the dataset has ground-truth triples")
    if pooled:
        return hits / total
    return sum(recalls) / len(recalls)


def per_predicate_recall(preds: PredictionSet, gt: SceneDataset, k) -> dict[int, tuple[float, int]]:
    """predicate_id -> (recall over its pooled triples, support); support > 0 only."""
    _check_k(k)
    gt_sets = _gt_triples(gt)
    hits: dict[int, int] = {}
    support: dict[int, int] = {}
    for image_id, triples in gt_sets.items():
        if not triples:
            continue
        top = _top_k(preds, image_id, k, len(triples))
        for triple in triples:
            p = triple[1]
            support[p] = support.get(p, 0) + 1
            if triple in top:
                hits[p] = hits.get(p, 0) + 1
    return {p: (hits.get(p, 0) / n, n) for p, n in sorted(support.items())}


def macro_recall_at_k(preds: PredictionSet, gt: SceneDataset, k) -> float:
    """Unweighted mean of per-predicate recalls over predicates with support."""
    per_p = per_predicate_recall(preds, gt, k)
    if not per_p:
        raise ValueError("no image in the dataset has ground-truth triples")
    return sum(recall for recall, _ in per_p.values()) / len(per_p)


def delta_report(
    before: dict[int, tuple[float, int]], after: dict[int, tuple[float, int]]
) -> list[tuple[int, float, int]]:
    """Per-predicate recall change (predicate, after - before, support).

    Zero-change predicates are omitted; rows sort by descending delta, then
    ascending predicate id. Inputs are per_predicate_recall maps over the
    same ground truth.
    """
    if set(before) != set(after):
        raise ValueError(
            f"predicate keys differ: only-before={sorted(set(before) - set(after))}, "
            f"only-after={sorted(set(after) - set(before))}"
        )
    rows: list[tuple[int, float, int]] = []
    for p, (recall_after, support_after) in after.items():
        recall_before, support_before = before[p]
        if support_after != support_before:
            raise ValueError(
                f"predicate {p}: support differs ({support_before} vs {support_after}); "
                "reports were built from different ground truth"
            )
        delta = recall_after - recall_before
        if delta != 0.0:
            rows.append((p, delta, support_after))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows


def recall_report(
    preds: PredictionSet,
    gt: SceneDataset,
    k_values=(20, 50, 100),
    pooled_micro: bool = False,
) -> RecallReport:
    micro: dict[object, float] = {}
    macro: dict[object, float] = {}
    per_pred: dict[tuple[int, object], float] = {}
    support: dict[int, int] = {}
    for k in k_values:
        micro[k] = micro_recall_at_k(preds, gt, k, pooled=pooled_micro)
        macro[k] = macro_recall_at_k(preds, gt, k)
        for p, (recall, n) in per_predicate_recall(preds, gt, k).items():
            per_pred[(p, k)] = recall
            support[p] = n
    return RecallReport(tuple(k_values), micro, macro, per_pred, support)


def _k_columns(k_values) -> list:
    numeric = sorted((k for k in k_values if isinstance(k, int)), reverse=True)
    return numeric + [k for k in k_values if not isinstance(k, int)]


def format_report_table(rows: list[tuple[str, RecallReport]]) -> str:
    """Aligned text table: one row per strategy, Macro then Micro R@K columns."""
    if not rows:
        raise ValueError("no report rows to format")
    ks = _k_columns(rows[0][1].k_values)
    label_width = max(8, max(len(label) for label, _ in rows))
    header_cells = [f"R@{k}" for k in ks]
    col = max(8, max(len(h) for h in header_cells) + 1)
    lines = [
        " " * label_width
        + " | "
        + "Macro".center(col * len(ks))
        + " | "
        + "Micro".center(col * len(ks)),
        "Strategy".ljust(label_width)
        + " | "
        + "".join(h.rjust(col) for h in header_cells)
        + " | "
        + "".join(h.rjust(col) for h in header_cells),
    ]
    lines.append("-" * len(lines[1]))
    for label, report in rows:
        line = (
            label.ljust(label_width)
            + " | "
            + "".join(f"{100.0 * report.macro[k]:.2f}".rjust(col) for k in ks)
            + " | "
            + "".join(f"{100.0 * report.micro[k]:.2f}".rjust(col) for k in ks)
        )
        lines.append(line)
    return "\n".join(lines) + "\n"


def report_to_doc(
    report: RecallReport,
    predicate_names,
    graph_constraint: bool | None = None,
    deltas: dict[int, dict] | None = None,
) -> dict:
    """Machine-readable report document (JSON-serializable)."""
    doc: dict = {
        "k": list(report.k_values),
        "micro": {str(k): report.micro[k] for k in report.k_values},
        "macro": {str(k): report.macro[k] for k in report.k_values},
        "per_predicate": [],
    }
    if graph_constraint is not None:
        doc["graph_constraint"] = graph_constraint
    for p in sorted(report.support):
        entry = {
            "name": predicate_names[p],
            "recall": {str(k): report.per_predicate[(p, k)] for k in report.k_values},
            "support": report.support[p],
        }
        if deltas is not None and p in deltas:
            entry["delta"] = deltas[p]
        doc["per_predicate"].append(entry)
    return doc
