"""Command-line entry point: ``freshrec <command> ...``.

State for the serving commands lives in a directory::

    albums.jsonl   album metadata, one record per line
    events.jsonl   usage events, one record per line
    store.bin      latest CF embedding store
    model.bin      latest cold-start network (feature spec in its metadata)
    arms.jsonl     bandit arm table
"""
from __future__ import annotations

import argparse
import logging
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bandit import Bandit
from .catalog import Catalog, write_albums, write_events
from .cf_trainer import EmbeddingStore, train_cf
from .codec import write_records
from .coldstart import FeatureSpec, MlpModel, TrainParams, make_training_set, train
from .config import FreshrecConfig, dump_config, load_config
from .simulator import ab_compare, generate_world, runtime_for
from .slate_service import ModelBundle, ServiceConfig, SlateService

_logger = logging.getLogger("freshrec")


def _config(path: Optional[str]) -> FreshrecConfig:
    return load_config(path) if path else FreshrecConfig()


def _state(args, cfg: FreshrecConfig) -> Path:
    return Path(args.state_dir or cfg.serve.state_dir)


def _load_catalog(state: Path) -> Catalog:
    cat = Catalog()
    albums = cat.load_albums(state / "albums.jsonl")
    events = cat.ingest_events(state / "events.jsonl") if (state / "events.jsonl").exists() else None
    for name, res in (("albums", albums), ("events", events)):
        if res is not None and res.rejected:
            _logger.warning("%s: %d lines rejected", name, len(res.rejected))
    return cat


def _spec_for(cat: Catalog, cfg: FreshrecConfig) -> FeatureSpec:
    genres = tuple(sorted({g for m in cat.albums.values() for g in m.genre_ids}))
    return FeatureSpec(cfg.cf.dim, genres, cfg.coldstart.label_buckets, cfg.cf.min_interactions)


def cmd_init_state(args) -> int:
    """Write a synthetic world's albums and organic usage as serving state."""
    cfg = _config(args.config)
    world = generate_world(cfg.world, args.seed)
    state = _state(args, cfg)
    state.mkdir(parents=True, exist_ok=True)
    write_albums(state / "albums.jsonl", world.albums())
    n = write_events(state / "events.jsonl", world.events)
    print(f"wrote {len(world.album_ids)} albums and {n} events to {state}")
    return 0


def cmd_train_cf(args) -> int:
    cfg = _config(args.config)
    state = _state(args, cfg)
    cat = _load_catalog(state)
    prev = EmbeddingStore.load(state / "store.bin").version if (state / "store.bin").exists() else 0
    store = train_cf(cat.event_table(), args.now, d=cfg.cf.dim, n_iter=cfg.cf.n_iter, seed=args.seed,
                     like_weight=cfg.cf.like_weight, version=prev + 1)
    store.save(state / "store.bin")
    print(f"store v{store.version}: {len(store.user_ids)} users x {len(store.item_ids)} albums, d={store.dim}")
    return 0


def cmd_train_coldstart(args) -> int:
    cfg = _config(args.config)
    state = _state(args, cfg)
    cat = _load_catalog(state)
    store = EmbeddingStore.load(state / "store.bin")
    spec = _spec_for(cat, cfg)
    rng = np.random.default_rng(args.seed)
    data = make_training_set(cat, store, spec, args.now, rng)
    if not data:
        print("no album has a ground-truth vector in the store; nothing to train on", file=sys.stderr)
        return 1
    cs = cfg.coldstart
    model, report = train([(x, y) for x, y, _ in data],
                          TrainParams(cs.lr, cs.epochs, cs.batch_size, args.seed, tuple(cs.hidden)))
    model.save(state / "model.bin", {"spec": spec.to_dict(), "store_version": store.version,
                                     "final_loss": report.final_loss})
    print(f"trained on {report.n_examples} albums: loss {report.epoch_losses[0]:.4f} -> {report.final_loss:.4f}")
    return 0


def _service(state: Path, cfg: FreshrecConfig) -> SlateService:
    cat = _load_catalog(state)
    store = EmbeddingStore.load(state / "store.bin")
    model, meta = MlpModel.load(state / "model.bin")
    bundle = ModelBundle(store, model, FeatureSpec.from_dict(meta["spec"]), version=store.version)
    svc = SlateService(cat, bundle, ServiceConfig(index_mode=cfg.index.to_mode(), bandit=cfg.bandit,
                                                  seed=cfg.serve.seed))
    if (state / "arms.jsonl").exists():
        svc.bandit = Bandit.load(state / "arms.jsonl")
    return svc


def cmd_tick(args) -> int:
    cfg = _config(args.config)
    state = _state(args, cfg)
    svc = _service(state, cfg)
    report = svc.scheduler_tick(args.now)
    if not report.ok:
        print(f"tick failed: {report.error}", file=sys.stderr)
        return 1
    svc.bandit.save(state / "arms.jsonl")
    print(f"tick at {report.now}: {report.n_predictions} predictions, "
          f"{len(report.registered)} new arms, {len(report.expired)} expired, {report.absorbed} rewards absorbed")
    return 0


def cmd_serve(args) -> int:
    from .http_api import ApiServer

    cfg = _config(args.config)
    state = _state(args, cfg)
    svc = _service(state, cfg)
    if args.start_ts is not None:
        # Replay clock: starts at --start-ts and advances with wall time.
        offset = args.start_ts - int(time.time())
        clock = (lambda: int(time.time()) + offset)
    else:
        clock = (lambda: int(time.time()))
    report = svc.scheduler_tick(clock())
    if not report.ok:
        print(f"initial tick failed: {report.error}", file=sys.stderr)
        return 1
    stop = threading.Event()

    def ticker():
        while not stop.wait(cfg.bandit.update_period):
            svc.scheduler_tick(clock())
            svc.bandit.save(state / "arms.jsonl")

    threading.Thread(target=ticker, name="freshrec-tick", daemon=True).start()
    server = ApiServer((args.host or cfg.serve.host, args.port if args.port is not None else cfg.serve.port),
                       svc, clock)
    print(f"serving on http://{server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.server_close()
        svc.bandit.save(state / "arms.jsonl")
    return 0


COMPARISONS = (("Editorial", "ColdStart"), ("ColdStart", "TsColdStart"))


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    sim = cfg.simulation
    world = generate_world(cfg.world, args.seed)
    runtime_for(world, cfg)
    seeds = [args.seed + i for i in range(sim.n_seeds)]
    cache: dict = {}
    comparisons = [ab_compare(world, a, b, sim.horizon_days, seeds, crossover=sim.crossover,
                              run_cache=cache, cfg=cfg) for a, b in COMPARISONS]

    records = [{"kind": "config", "seed": args.seed, "package_version": __version__, **cfg.to_dict()}]
    for (policy, seed, half, _), rep in sorted(cache.items(), key=lambda kv: (kv[0][0].value, *kv[0][1:])):
        records.append({"kind": "policy_run", "half": half, **rep.to_record()})
    records += [{"kind": "ab_compare", **c.to_record()} for c in comparisons]
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, records)

    print(f"{'policy':<12} {'CTR':>8} {'displayed/wk':>13} {'clicked/wk':>11}")
    by_policy: dict[str, list] = {}
    for (policy, *_), rep in cache.items():
        by_policy.setdefault(policy.value, []).append(rep)
    for name in sorted(by_policy):
        reps = by_policy[name]
        ctr = sum(r.clicks for r in reps) / max(1, sum(r.slates for r in reps))
        disp = float(np.mean([r.weekly_distinct_albums_displayed for r in reps]))
        clk = float(np.mean([r.weekly_distinct_albums_clicked for r in reps]))
        print(f"{name:<12} {ctr:>8.4f} {disp:>13.1f} {clk:>11.1f}")
    print()
    print(f"{'B vs A':<26} {'CTR lift':>16} {'displayed x':>14} {'clicked x':>14}")
    for c in comparisons:
        print(f"{c.policy_b + ' vs ' + c.policy_a:<26} "
              f"{c.ctr_lift.mean:>+8.3f} ± {c.ctr_lift.stdev:.3f} "
              f"{c.displayed_ratio.mean:>8.2f} ± {c.displayed_ratio.stdev:.2f} "
              f"{c.clicked_ratio.mean:>8.2f} ± {c.clicked_ratio.stdev:.2f}")
    print(f"\nwrote {len(records)} records to {out}")
    return 0


def cmd_show_config(args) -> int:
    print(dump_config(_config(args.config)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freshrec", description="New-release carousel recommender.")
    p.add_argument("--version", action="version", version=f"freshrec {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, state=True, now=False, seed=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI config file")
        if state:
            sp.add_argument("--state-dir", help="serving state directory (default from config)")
        if now:
            sp.add_argument("--now", type=int, required=True, help="unix timestamp")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    add("init-state", cmd_init_state, "write a synthetic catalog and usage log as serving state", seed=True)
    add("train-cf", cmd_train_cf, "factorize the week of usage ending at --now", now=True, seed=True)
    add("train-coldstart", cmd_train_coldstart, "fit the cold-start network against the current store",
        now=True, seed=True)
    add("tick", cmd_tick, "run one refresh tick and persist the arm table", now=True)
    sp = add("serve", cmd_serve, "start the HTTP API")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--start-ts", type=int, help="run the service clock from this timestamp")
    sp = add("simulate", cmd_simulate, "run the simulated A/B comparisons", state=False, seed=True)
    sp.add_argument("--out", required=True, help="line-delimited metrics file to write")
    add("show-config", cmd_show_config, "print the effective configuration", state=False)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"freshrec: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
