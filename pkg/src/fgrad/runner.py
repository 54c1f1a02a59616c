"""Execute a resolved config and write its metrics sinks."""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

from .config import build, dump_config
from .trainer import MetricsRecord, train_run

log = logging.getLogger(__name__)

SCALAR_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "skipped_steps")
BLOCK_FIELDS = ("local_train_loss", "local_test_loss", "cos_activity", "cos_weight", "zero_guesses")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def record_json(rec: MetricsRecord) -> str:
    return json.dumps({k: _clean(v) for k, v in rec.to_dict().items()}, sort_keys=False, allow_nan=False)


def csv_header(n_blocks: int) -> list:
    """``epoch,lr,train_loss,train_acc,test_loss,test_acc,skipped_steps`` then ``<field>_<block>`` per block field."""
    return list(SCALAR_FIELDS) + [f"{f}_{j}" for f in BLOCK_FIELDS for j in range(n_blocks)]


def csv_row(rec: MetricsRecord) -> list:
    d = rec.to_dict()
    row = [_clean(d[k]) for k in SCALAR_FIELDS]
    for f in BLOCK_FIELDS:
        row += _clean(d[f])
    return ["" if v is None else v for v in row]


def execute(cfg: dict, out_dir=None, progress="stdout") -> list:
    """Train per ``cfg``; writes ``config.resolved``, ``metrics.jsonl`` and ``metrics.csv``.

    Returns the list of :class:`MetricsRecord`. Progress lines go to
    ``progress`` (standard output by default, ``None`` for silence) as
    ``epoch=<k> loss=<v> acc=<v>``.
    """
    if progress == "stdout":
        progress = sys.stdout
    out = Path(out_dir or cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    net, plan, train, test = build(cfg)
    records = []
    t0 = time.perf_counter()
    with open(out / "metrics.jsonl", "w") as fj, open(out / "metrics.csv", "w", newline="") as fc:
        writer = csv.writer(fc)
        writer.writerow(csv_header(net.n_blocks))
        for rec in train_run(net, plan, train, test):
            fj.write(record_json(rec) + "\n")
            fj.flush()
            writer.writerow(csv_row(rec))
            fc.flush()
            records.append(rec)
            if progress is not None:
                print(f"epoch={rec.epoch} loss={rec.train_loss:.6f} acc={rec.test_acc:.4f}", file=progress, flush=True)
    log.info("run finished in %.1fs -> %s", time.perf_counter() - t0, out)
    return records
