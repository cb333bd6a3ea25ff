"""Layout-fidelity metrics over detector output.

Every ground-truth entity is scored by its best same-color detection IoU
(zero when the class was never detected); mean IoU averages over entities,
and the success rate counts entities above a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dataset import iou
from .errors import ValidationError


@dataclass(frozen=True)
class EvalRow:
    record: int
    entity: int
    max_iou: float
    matched: bool


@dataclass
class EvalReport:
    miou: float
    success_rate: float
    n_entities: int
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "success_rate": self.success_rate,
            "n_entities": self.n_entities,
            "rows": [
                {
                    "record": r.record,
                    "entity": r.entity,
                    "max_iou": r.max_iou,
                    "matched": r.matched,
                }
                for r in self.rows
            ],
        }


def entity_max_iou(truth_color: str, truth_box, detections) -> float:
    """Best IoU between one ground truth and same-color detections."""
    best = 0.0
    for d in detections:
        if d.color == truth_color:
            best = max(best, iou(d.box, truth_box))
    return best


def evaluate_records(pairs, threshold: float = 0.5) -> EvalReport:
    """Score (detections, truths) pairs; truths are (color, box) tuples.

    threshold only affects the success rate, not the mean IoU.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold {threshold} outside (0, 1)")
    rows = []
    total = 0.0
    hits = 0
    for rec_idx, (detections, truths) in enumerate(pairs):
        for ent_idx, (color, box) in enumerate(truths):
            # builtin scalars keep the report JSON-serializable
            v = float(entity_max_iou(color, box, detections))
            rows.append(EvalRow(rec_idx, ent_idx, v, v >= threshold))
            total += v
            hits += v >= threshold
    if not rows:
        raise ValidationError("no entities to evaluate")
    n = len(rows)
    return EvalReport(total / n, hits / n, n, rows)
