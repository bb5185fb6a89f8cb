"""False reject / false alarm rates, the WWS score and score-file I/O."""

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .validation import ValidationError, check_binary_labels, check_probabilities

SCORE_COLUMNS = ("id", "label", "p_a", "p_v", "p_av", "decision")


@dataclass(frozen=True)
class EvalResult:
    """Detection rates in percent; a rate is ``None`` when its class is absent."""

    frr: float | None
    far: float | None
    wws: float | None
    threshold: float | None
    n_wake: int
    n_non_wake: int
    n_fr: int
    n_fa: int

    def as_dict(self, decimals=None):
        d = asdict(self)
        if decimals is not None:
            for k in ("frr", "far", "wws"):
                if d[k] is not None:
                    d[k] = round(d[k], decimals)
        return d


def _split_scores(scores):
    if isinstance(scores, tuple) and len(scores) == 2 and np.ndim(scores[0]) == 1:
        probs, labels = scores
    else:
        pairs = list(scores)
        probs = [p for p, _ in pairs]
        labels = [y for _, y in pairs]
    probs = check_probabilities(probs, "scores")
    labels = check_binary_labels(labels)
    if probs.shape != labels.shape:
        raise ValidationError("probabilities and labels differ in length")
    if probs.size == 0:
        raise ValidationError("cannot evaluate an empty score list")
    return probs, labels


def evaluate_decisions(decisions, labels, threshold=None):
    """Rates from hard 0/1 decisions."""
    decisions = np.asarray(decisions).astype(bool)
    labels = check_binary_labels(labels)
    if decisions.size == 0:
        raise ValidationError("cannot evaluate an empty score list")
    if decisions.shape != labels.shape:
        raise ValidationError("decisions and labels differ in length")
    pos = labels == 1
    n_wake = int(pos.sum())
    n_non_wake = int((~pos).sum())
    n_fr = int((pos & ~decisions).sum())
    n_fa = int((~pos & decisions).sum())
    frr = 100.0 * n_fr / n_wake if n_wake else None
    far = 100.0 * n_fa / n_non_wake if n_non_wake else None
    wws = frr + far if frr is not None and far is not None else None
    return EvalResult(frr, far, wws, threshold, n_wake, n_non_wake, n_fr, n_fa)


def evaluate(scores, threshold=0.5):
    """FRR, FAR and WWS = FRR + FAR at ``threshold`` (``prob >= threshold`` is a wake).

    Args:
        scores: iterable of ``(prob, label)`` pairs, or a ``(probs, labels)``
            tuple of 1-D arrays.
    """
    probs, labels = _split_scores(scores)
    return evaluate_decisions(probs >= threshold, labels, float(threshold))


def sweep(scores, thresholds):
    """One :class:`EvalResult` per threshold."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValidationError("threshold grid is empty")
    if thresholds.min() < 0.0 or thresholds.max() > 1.0:
        raise ValidationError("thresholds must lie in [0, 1]")
    probs, labels = _split_scores(scores)
    return [evaluate_decisions(probs >= t, labels, float(t)) for t in thresholds]


def best_threshold(scores, thresholds=None):
    """Threshold of the grid with the lowest WWS (ties -> smallest threshold)."""
    grid = np.linspace(0.0, 1.0, 101) if thresholds is None else thresholds
    results = [r for r in sweep(scores, grid) if r.wws is not None]
    if not results:
        raise ValidationError("both classes are needed to choose a threshold")
    return min(results, key=lambda r: (r.wws, r.threshold)).threshold


# ---------------------------------------------------------------------------
# score CSV and reports
# ---------------------------------------------------------------------------


def _fmt(p):
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return ""
    return f"{float(p):.8f}"


def write_scores(path, rows):
    """Write score rows (dicts keyed by ``SCORE_COLUMNS``) to a CSV file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for r in rows:
            writer.writerow([
                r["id"], int(r["label"]), _fmt(r.get("p_a")), _fmt(r.get("p_v")),
                _fmt(r.get("p_av")), int(r["decision"]),
            ])
    return path


def read_scores(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(SCORE_COLUMNS)}")
        rows = []
        for lineno, r in enumerate(reader, start=2):
            try:
                rows.append({
                    "id": r["id"],
                    "label": int(r["label"]),
                    "p_a": float(r["p_a"]) if r["p_a"] else None,
                    "p_v": float(r["p_v"]) if r["p_v"] else None,
                    "p_av": float(r["p_av"]) if r["p_av"] else None,
                    "decision": int(r["decision"]),
                })
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return rows


def evaluate_rows(rows):
    """Rates from the ``decision`` column of score rows."""
    return evaluate_decisions([r["decision"] for r in rows], [r["label"] for r in rows])


def _pct(v):
    return "-" if v is None else f"{v:.2f}"


def format_report(entries, title="Wake word spotting results"):
    """Table of FRR/FAR/WWS (percent) per system, one column group per split.

    Args:
        entries: list of ``(system, split, EvalResult)``.
    """
    splits = []
    for _, split, _ in entries:
        if split not in splits:
            splits.append(split)
    systems = []
    for system, _, _ in entries:
        if system not in systems:
            systems.append(system)
    table = {(s, sp): r for s, sp, r in entries}
    width = max([len("System")] + [len(s) for s in systems])
    head1 = " " * width + "".join(f" | {sp.capitalize() + ' [%]':^23}" for sp in splits)
    head2 = f"{'System':<{width}}" + "".join(f" | {'FRR':>7}{'FAR':>8}{'WWS':>8}" for _ in splits)
    lines = [title, head1, head2, "-" * len(head2)]
    for s in systems:
        cells = []
        for sp in splits:
            r = table.get((s, sp))
            if r is None:
                cells.append(f" | {'-':>7}{'-':>8}{'-':>8}")
            else:
                cells.append(f" | {_pct(r.frr):>7}{_pct(r.far):>8}{_pct(r.wws):>8}")
        lines.append(f"{s:<{width}}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_report(path_txt, path_jsonl, entries, header=None, title="Wake word spotting results"):
    """Human-readable table plus a JSON-lines summary (percentages to 2 decimals)."""
    text = format_report(entries, title)
    if header:
        text = "".join(f"# {k}: {v}\n" for k, v in header.items()) + text
    with open(path_txt, "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(path_jsonl, "w", encoding="utf-8") as fh:
        for system, split, res in entries:
            row = {"system": system, "split": split, **res.as_dict(decimals=2)}
            if header:
                row.update({k: v for k, v in header.items() if k not in row})
            fh.write(json.dumps(row, sort_keys=False) + "\n")
    return text
