"""Localization and counting metrics, density groups and component ablation."""

import csv
import io
import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DomainError
from .serialize import atomic_write_text, dumps_json

COMPONENTS = ("CSOE", "MDCB", "CP", "ARFW")
DEFAULT_THRESHOLD = 4.0


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple


def _coords(ps):
    return np.asarray(getattr(ps, "points", ps), dtype=np.float64).reshape(-1, 2)


def match_points(pred, gt, threshold=DEFAULT_THRESHOLD, method="greedy"):
    """One-to-one matching of predicted to true points within ``threshold`` px.

    ``greedy`` walks all pairs by ascending distance (ties by prediction
    index, then truth index); ``hungarian`` maximises the number of matches
    and then minimises their total distance.
    """
    if not threshold > 0:
        raise DomainError(f"threshold must be positive, got {threshold}")
    P, G = _coords(pred), _coords(gt)
    dist = np.sqrt(((P[:, None, :] - G[None, :, :]) ** 2).sum(-1)) if len(P) and len(G) \
        else np.zeros((len(P), len(G)))
    pairs = []
    if method == "greedy":
        ii, jj = np.nonzero(dist <= threshold)
        order = np.lexsort((jj, ii, dist[ii, jj]))
        used_p, used_g = set(), set()
        for t in order:
            i, j = int(ii[t]), int(jj[t])
            if i not in used_p and j not in used_g:
                used_p.add(i)
                used_g.add(j)
                pairs.append((i, j, float(dist[i, j])))
    elif method == "hungarian":
        if dist.size:
            big = threshold * (len(P) + len(G) + 1) + 1.0
            cost = np.where(dist <= threshold, dist, big)
            for i, j in zip(*linear_sum_assignment(cost)):
                if dist[i, j] <= threshold:
                    pairs.append((int(i), int(j), float(dist[i, j])))
    else:
        raise ConfigError(f"unknown matching method {method!r}")
    pairs.sort()
    tp = len(pairs)
    return MatchResult(tp, len(P) - tp, len(G) - tp, tuple(pairs))


def precision_recall_f1(mr):
    """Precision, recall and F1 with the empty-set conventions.

    Precision is 0 without predictions; recall is 1 when there is neither
    truth nor prediction and 0 otherwise without truth; F1 is 0 when
    precision + recall is 0.
    """
    p = mr.tp / (mr.tp + mr.fp) if mr.tp + mr.fp else 0.0
    if mr.tp + mr.fn:
        r = mr.tp / (mr.tp + mr.fn)
    else:
        r = 1.0 if mr.fp == 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def mae_rmse(true_counts, pred_counts):
    t = np.asarray(true_counts, dtype=np.float64)
    p = np.asarray(pred_counts, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1:
        raise DomainError(f"count lists differ in shape: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DomainError("need at least one count")
    e = t - p
    return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e)))


def evaluate(preds, gts, threshold=DEFAULT_THRESHOLD, method="greedy"):
    """Per-image rows and a summary; the summary F1 pools tp/fp/fn over images."""
    if len(preds) != len(gts):
        raise DomainError("prediction and truth lists differ in length")
    rows = []
    tot = [0, 0, 0]
    for i, (p, g) in enumerate(zip(preds, gts)):
        mr = match_points(p, g, threshold, method)
        prec, rec, f1 = precision_recall_f1(mr)
        rows.append({"index": i, "gt_count": len(_coords(g)), "pred_count": len(_coords(p)),
                     "tp": mr.tp, "fp": mr.fp, "fn": mr.fn,
                     "precision": prec, "recall": rec, "f1": f1})
        tot = [tot[0] + mr.tp, tot[1] + mr.fp, tot[2] + mr.fn]
    prec, rec, f1 = precision_recall_f1(MatchResult(tot[0], tot[1], tot[2], ()))
    summary = {"images": len(rows), "threshold": float(threshold), "matching": method,
               "tp": tot[0], "fp": tot[1], "fn": tot[2],
               "precision": prec, "recall": rec, "f1": f1}
    if rows:
        summary["mae"], summary["rmse"] = mae_rmse([r["gt_count"] for r in rows],
                                                   [r["pred_count"] for r in rows])
    return rows, summary


def density_group_analysis(samples, group_count, threshold=DEFAULT_THRESHOLD):
    """Rank ``(gt, pred)`` samples by true count and split into contiguous groups.

    Ties in the ranking keep input order. Groups differ in size by at most
    one. Each row reports the mean true count and mean per-image F1.
    """
    if group_count < 1:
        raise ConfigError("group_count must be >= 1")
    if len(samples) < group_count:
        raise ConfigError(f"{len(samples)} samples cannot fill {group_count} groups")
    counts = np.array([len(_coords(g)) for g, _ in samples])
    f1s = np.array([precision_recall_f1(match_points(p, g, threshold))[2] for g, p in samples])
    order = np.argsort(counts, kind="stable")
    out = []
    for gi, idx in enumerate(np.array_split(order, group_count)):
        out.append({"group": gi, "size": int(len(idx)), "mean_density": float(counts[idx].mean()),
                    "mean_f1": float(f1s[idx].mean())})
    return out


# ---------------------------------------------------------------------------
# reports

def rows_to_csv(rows, fields=None):
    buf = io.StringIO()
    if rows:
        fields = fields or list(rows[0])
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def csv_to_rows(text):
    def conv(v):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(lines)]


def write_report(prefix, rows, summary, meta=None):
    """Write ``<prefix>.csv`` (per-row) and ``<prefix>.json`` (summary + rows + meta)."""
    atomic_write_text(f"{prefix}.csv", rows_to_csv(rows))
    doc = {"summary": summary, "rows": rows, "meta": meta or {}}
    atomic_write_text(f"{prefix}.json", dumps_json(doc) + "\n")
    return f"{prefix}.csv", f"{prefix}.json"


# ---------------------------------------------------------------------------
# ablation

def validate_toggles(toggles):
    toggles = frozenset(toggles)
    unknown = toggles - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown components {sorted(unknown)}; choose from {COMPONENTS}")
    if "ARFW" in toggles and "MDCB" not in toggles:
        raise ConfigError("ARFW must work with MDCB: add MDCB to any configuration using ARFW")
    return toggles


def valid_configs():
    """All toggle subsets allowed by the ARFW-needs-MDCB rule, largest first."""
    out = []
    for size in range(len(COMPONENTS), -1, -1):
        for combo in itertools.combinations(COMPONENTS, size):
            if "ARFW" in combo and "MDCB" not in combo:
                continue
            out.append(frozenset(combo))
    return out


def config_label(toggles):
    return "+".join(c for c in COMPONENTS if c in toggles) or "none"


def hyper_for(base, toggles):
    toggles = validate_toggles(toggles)
    return replace(base, use_csoe="CSOE" in toggles, use_mdcb="MDCB" in toggles,
                   use_cp="CP" in toggles, use_arfw="ARFW" in toggles)


def ablation_run(configs, train_scenes, test_scenes, base_hyper, train_cfg, threshold=DEFAULT_THRESHOLD,
                 model_seed=0, d_seed=0):
    """Train and evaluate one model per toggle set; returns one row per config.

    Every configuration is validated before any training starts.
    """
    from .training import build_model, decode_batch, train_loop

    configs = [validate_toggles(c) for c in configs]
    images = np.stack([s.image for s in test_scenes])
    gts = [s.truth for s in test_scenes]
    table = []
    for toggles in configs:
        model = build_model(hyper_for(base_hyper, toggles), model_seed, d_seed)
        model, log = train_loop(model, train_scenes, train_cfg)
        _, summary = evaluate(decode_batch(model, images), gts, threshold)
        table.append({"config": config_label(toggles), "f1": summary["f1"],
                      "precision": summary["precision"], "recall": summary["recall"],
                      "mae": summary.get("mae", 0.0), "rmse": summary.get("rmse", 0.0),
                      "final_loss": log[-1]["total"] if log else float("nan")})
    return table
