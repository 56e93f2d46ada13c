"""Command line entry point.

    catdiv [--config FILE] [--set key=value ...] COMMAND

Commands: ingest, train, eval, build-index, recommend, report. On failure a
single line ``error: <code>: <message>`` goes to stderr and the exit status
is 2 (config), 3 (data), 4 (model) or 5 (internal).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from .config import Config
from .errors import CatdivError, ConfigError, DataError, ModelError
from .evaluate import diversity_report, evaluate_model, evaluate_statistics, rank_categories, write_eval_records
from .ingest import Catalog, InteractionLog, ParseReport, build_histories, parse_log, split_by_day
from .itemmatch import (build_index, compute_item_stats, load_index, posterior_score, read_recommendations,
                        retrieve_items, save_index, write_recommendations)
from .model import category_tower, init_params, load_checkpoint, save_checkpoint
from .samples import UserContext, build_graph, dump_samples, make_eval_samples, make_training_samples
from .train import fit

logger = logging.getLogger("catdiv")

COMMANDS = ("ingest", "train", "eval", "build-index", "recommend", "report")
_COLUMNS = ("user", "item", "category", "behavior", "timestamp")


class _Outputs:
    """Collects outputs written to temp files; commits them all or none."""

    def __init__(self):
        self._pending: list[tuple[Path, Path]] = []

    def path(self, final) -> Path:
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", dir=final.parent)
        os.close(fd)
        self._pending.append((Path(tmp), final))
        return Path(tmp)

    def commit(self) -> None:
        # mkstemp creates 0600 files; give outputs the usual umask-based mode
        umask = os.umask(0)
        os.umask(umask)
        for tmp, final in self._pending:
            os.chmod(tmp, 0o666 & ~umask)
            os.replace(tmp, final)
        self._pending.clear()

    def discard(self) -> None:
        for tmp, _ in self._pending:
            with contextlib.suppress(FileNotFoundError):
                tmp.unlink()
        self._pending.clear()


@contextlib.contextmanager
def _work_dir_lock(work_dir: Path):
    work_dir.mkdir(parents=True, exist_ok=True)
    lock = work_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CatdivError(f"{work_dir} is locked by another run ({lock})", code="work-dir-locked")
    os.close(fd)
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# -- ingest artifacts ----------------------------------------------------------

def _save_npy(path: Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:  # np.save on a name would append ".npy"
        np.save(fh, arr, allow_pickle=False)


def _ingest_dir(cfg: Config) -> Path:
    return cfg.work_dir / "ingest"


def _load_ingest(cfg: Config) -> tuple[InteractionLog, Catalog]:
    d = _ingest_dir(cfg)
    try:
        cols = [np.load(d / f"{c}.npy") for c in _COLUMNS]
        catalog = Catalog(np.load(d / "catalog_items.npy"), np.load(d / "catalog_categories.npy"))
    except FileNotFoundError as exc:
        raise DataError(f"missing ingest output in {d}; run 'ingest' first", code="missing-ingest") from exc
    return InteractionLog(*cols), catalog


def _contexts_for_serving(train_histories, max_history: int) -> list[UserContext]:
    """Per user, the last train events as the serving context."""
    out = []
    for user in sorted(train_histories):
        h = train_histories[user]
        out.append(UserContext(
            user,
            h.items[-max_history:],
            h.categories[-max_history:],
            dict(Counter(h.categories.tolist())),
        ))
    return out


# -- commands ------------------------------------------------------------------

def cmd_ingest(cfg: Config, out: _Outputs) -> None:
    if not cfg["paths.log"]:
        raise ConfigError("paths.log is not set", code="missing-log")
    report = ParseReport()
    log, catalog = parse_log(
        cfg["paths.log"],
        max_users=cfg["data.max_users"] or None,
        max_rows=cfg["data.max_rows"] or None,
        report=report,
    )
    report.write()
    histories = build_histories(log)
    splits = split_by_day(histories, cfg.split_spec())
    graph = build_graph(splits.train, catalog)
    order = np.lexsort((log.timestamp, log.user))
    s = log.take(order)
    d = _ingest_dir(cfg)
    for name in _COLUMNS:
        _save_npy(out.path(d / f"{name}.npy"), getattr(s, name))
    _save_npy(out.path(d / "catalog_items.npy"), catalog.items)
    _save_npy(out.path(d / "catalog_categories.npy"), catalog.category_of(catalog.items))
    edges = sorted(graph.edges.items())
    _save_npy(out.path(d / "graph.npy"),
              np.array([(u, c, n) for (u, c), n in edges], dtype=np.int64).reshape(-1, 3))
    stats = {
        "rows": report.rows, "kept": report.kept, "malformed": report.malformed,
        "category_conflicts": report.category_conflicts, "users_dropped": report.users_dropped,
        "users": len(histories), "items": len(catalog), "categories": catalog.n_categories,
        "train_events": sum(len(h) for h in splits.train.values()),
        "valid_events": sum(len(h) for h in splits.valid.values()),
        "test_events": sum(len(h) for h in splits.test.values()),
        "dropped_events": sum(splits.dropped.values()),
        "graph_edges": len(edges),
    }
    with open(out.path(d / "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _prepare(cfg: Config):
    log, catalog = _load_ingest(cfg)
    histories = build_histories(log)
    splits = split_by_day(histories, cfg.split_spec())
    return log, catalog, histories, splits


def cmd_train(cfg: Config, out: _Outputs) -> None:
    log, catalog, histories, splits = _prepare(cfg)
    hp = cfg.hparams()
    tc = cfg.train_config()
    graph = build_graph(splits.train, catalog)
    samples = make_training_samples(
        splits.train, catalog, graph,
        max_history=hp.max_history,
        per_user_samples=cfg["samples.per_user"],
        min_history=cfg["samples.min_history"],
        n_neg=tc.n_neg, n_nei=tc.n_nei,
        seed=cfg["samples.seed"],
        negative_pool=cfg["samples.negative_pool"],
    )
    if not samples:
        raise DataError("no training samples could be drawn", code="no-samples")
    valid = make_eval_samples(histories, cfg.split_spec(), "valid", hp.max_history)
    train_items = np.concatenate([h.items for h in splits.train.values()])
    ids, counts = np.unique(train_items, return_counts=True)
    vocab = ids[counts >= cfg["model.min_item_count"]]
    params = init_params(hp, vocab, catalog.categories, seed=cfg["model.seed"])
    reports = cfg.path("reports", "reports")
    epochs_tmp = out.path(reports / "epochs.jsonl")
    if cfg["samples.dump"]:
        dump_samples(samples, out.path(reports / "samples.tsv"))
    logger.info("training on %d samples, %d validation samples", len(samples), len(valid))
    result = fit(samples, params, tc, valid_samples=valid, report_path=epochs_tmp)
    save_checkpoint(result.params, out.path(cfg.path("checkpoint", "model.ckpt")))


def _load_model(cfg: Config):
    path = cfg.path("checkpoint", "model.ckpt")
    if not path.exists():
        raise ModelError(f"no checkpoint at {path}; run 'train' first", code="missing-checkpoint")
    return load_checkpoint(path)


def cmd_eval(cfg: Config, out: _Outputs) -> None:
    params = _load_model(cfg)
    _, catalog, histories, _ = _prepare(cfg)
    samples = make_eval_samples(histories, cfg.split_spec(), "test", params.hparams.max_history)
    ks = cfg["eval.ks"]
    reports = [evaluate_model(samples, params, ks, method="model"),
               evaluate_statistics(samples, catalog, ks)]
    rdir = cfg.path("reports", "reports")
    write_eval_records(reports, out.path(rdir / "eval.jsonl"))
    table = "\n\n".join(r.to_table() for r in reports) + "\n"
    with open(out.path(rdir / "eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")


def cmd_build_index(cfg: Config, out: _Outputs) -> None:
    log, catalog = _load_ingest(cfg)
    train = log.take(log.timestamp < cfg["split.train_end"])
    stats = compute_item_stats(train)
    scores = {i: posterior_score(s, cfg["index.smoothing"]) for i, s in stats.items()}
    save_index(build_index(scores, catalog, cfg["index.n"]), out.path(cfg.path("index", "index.bin")))


def cmd_recommend(cfg: Config, out: _Outputs) -> None:
    params = _load_model(cfg)
    index_path = cfg.path("index", "index.bin")
    if not index_path.exists():
        raise DataError(f"no index at {index_path}; run 'build-index' first", code="missing-index")
    index = load_index(index_path)
    _, _, _, splits = _prepare(cfg)
    tower = category_tower(params)
    contexts = _contexts_for_serving(splits.train, params.hparams.max_history)
    rankings = [rank_categories(ctx, params, tower=tower).category_ids for ctx in contexts]
    rdir = cfg.path("reports", "reports")
    for k in cfg["pipeline.ks"]:
        recs = [retrieve_items(r, k, index, cfg["pipeline.m"], user_id=ctx.user_id)
                for ctx, r in zip(contexts, rankings)]
        write_recommendations(recs, out.path(rdir / f"recommendations_k{k}.tsv"))


def cmd_report(cfg: Config, out: _Outputs) -> None:
    _, _, _, splits = _prepare(cfg)
    T = cfg["model.max_history"]
    ckpt = cfg.path("checkpoint", "model.ckpt")
    if ckpt.exists():
        T = load_checkpoint(ckpt).hparams.max_history
    history_cats = {u: h.categories[-T:].tolist() for u, h in splits.train.items()}
    rdir = cfg.path("reports", "reports")
    records = []
    for k in cfg["pipeline.ks"]:
        path = rdir / f"recommendations_k{k}.tsv"
        if not path.exists():
            raise DataError(f"missing {path}; run 'recommend' first", code="missing-recommendations")
        recs = read_recommendations(path)
        rep = diversity_report({u: [c for _, c, _ in rows] for u, rows in recs.items()}, history_cats)
        records.append(rep.to_record(k=k, m=cfg["pipeline.m"]))
    with open(out.path(rdir / "diversity.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    lines = [f"{'K':>4}{'M':>6}{'users':>8}{'exposed':>10}{'exposed_new':>13}"]
    lines += [f"{r['k']:>4}{r['m']:>6}{r['n_users']:>8}{r['mean_exposed']:>10.3f}{r['mean_exposed_new']:>13.3f}"
              for r in records]
    table = "\n".join(lines) + "\n"
    with open(out.path(rdir / "diversity.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")


_HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "build-index": cmd_build_index,
    "recommend": cmd_recommend,
    "report": cmd_report,
}


def run(command: str, cfg: Config) -> None:
    """Run one subcommand; outputs appear only if it succeeds."""
    out = _Outputs()
    with _work_dir_lock(cfg.work_dir):
        try:
            _HANDLERS[command](cfg, out)
            with open(out.path(cfg.work_dir / f"{command}.config"), "w", encoding="utf-8") as fh:
                fh.write(cfg.dump())
            out.commit()
        finally:
            out.discard()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catdiv", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("command", choices=COMMANDS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.from_file(args.config, args.set)
        run(args.command, cfg)
    except CatdivError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except Exception as exc:  # noqa: BLE001
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
