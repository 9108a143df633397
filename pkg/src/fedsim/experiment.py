"""End-to-end federated experiments on the synthetic report task.

The server and client roles never share memory: they talk only through the
blob and status stores, whether they run as threads of one process
(``inprocess``) or as separate OS processes (``multiprocess``).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import signal
import subprocess
import sys
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsim.aggregation import AggregatorConfig, ClientUpdate, aggregate
from fedsim.client import (
    HONEST,
    TRAIN_RATIOS,
    VALIDATION_RATIOS,
    AdversaryMode,
    LocalTrainConfig,
    PartitionSpec,
    apply_adversary,
    local_train,
    partition,
    write_loss_csvs,
)
from fedsim.coordination import (
    BlobStore,
    RoundStatus,
    ServerPhase,
    StatusStore,
    barrier_await_clients,
    client_await_global,
    publish_global_and_advance,
    publish_initial,
    recover_published_round,
)
from fedsim.errors import CancelledError, ConfigError, DivergenceError, FedSimError
from fedsim.metrics import evaluate_corpus, write_metrics_csv, write_metrics_json
from fedsim.params import digest_bytes
from fedsim.toy_model import Dataset, SyntheticTaskSpec, ToyCaptioner, synth_generate, token_strings

log = logging.getLogger(__name__)


def derive_seed(base: int, *keys) -> int:
    """Independent 32-bit seed for a named stream, e.g. ``("train", round, client)``."""
    words = [int(base) & 0xFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    run_id: str = "default"
    num_clients: int = 4
    rounds: int = 3
    train_ratios: tuple | None = None
    validation_ratios: tuple | None = None
    class_skew: float = 0.0
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    init_scale: float = 0.1
    adversaries: dict = field(default_factory=dict)  # client_id -> AdversaryMode
    seed: int = 0
    store_root: str = "."
    poll_interval: float = 0.2
    timeout: float = 600.0
    bleu_max_n: int = 4

    def __post_init__(self):
        if self.train_ratios is None:
            self.train_ratios = TRAIN_RATIOS if self.num_clients == 4 else (1,) * self.num_clients
        if self.validation_ratios is None:
            self.validation_ratios = VALIDATION_RATIOS if self.num_clients == 4 else (1,) * self.num_clients
        self.train_ratios = tuple(self.train_ratios)
        self.validation_ratios = tuple(self.validation_ratios)
        self.adversaries = {
            int(k): v if isinstance(v, AdversaryMode) else AdversaryMode.parse(str(v))
            for k, v in self.adversaries.items()
        }
        self.validate()

    def validate(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for name in ("train_ratios", "validation_ratios"):
            if len(getattr(self, name)) != self.num_clients:
                raise ConfigError(f"{name} needs one entry per client ({self.num_clients})")
        if self.aggregator.strategy == "krum" and self.num_clients < self.aggregator.fault_tolerance + 3:
            raise ConfigError(
                f"krum with f={self.aggregator.fault_tolerance} needs at least "
                f"{self.aggregator.fault_tolerance + 3} clients"
            )
        for k in self.adversaries:
            if not 1 <= k <= self.num_clients:
                raise ConfigError(f"adversary assigned to unknown client {k}")
        if not self.run_id or "/" in self.run_id or self.run_id.startswith("."):
            raise ConfigError(f"invalid run_id {self.run_id!r}")

    @property
    def client_ids(self) -> list[int]:
        return list(range(1, self.num_clients + 1))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train_ratios"] = list(self.train_ratios)
        d["validation_ratios"] = list(self.validation_ratios)
        d["adversaries"] = {str(k): str(v) for k, v in sorted(self.adversaries.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            for name, kind in (("aggregator", AggregatorConfig), ("local", LocalTrainConfig), ("task", SyntheticTaskSpec)):
                if isinstance(d.get(name), dict):
                    d[name] = kind(**d[name])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def replace(self, **changes) -> "ExperimentConfig":
        if changes.get("num_clients", self.num_clients) != self.num_clients:
            # the old ratios cannot fit a different client count; fall back to defaults
            changes.setdefault("train_ratios", None)
            changes.setdefault("validation_ratios", None)
        return dataclasses.replace(self, **changes)


class RunContext:
    """Everything a role needs, rebuilt deterministically from the config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.blob = BlobStore(cfg.store_root)
        self.status = StatusStore(cfg.store_root)
        self.task = dataclasses.replace(cfg.task, seed=derive_seed(cfg.seed, "task"))
        self.model = ToyCaptioner.for_task(self.task)
        self._splits = None
        self._shards = None

    @property
    def run_dir(self) -> Path:
        return self.blob.run_dir(self.cfg.run_id)

    @property
    def splits(self) -> dict[str, Dataset]:
        if self._splits is None:
            self._splits = synth_generate(self.task)
        return self._splits

    def shards(self) -> tuple[list[Dataset], list[Dataset]]:
        if self._shards is None:
            cfg = self.cfg
            train = partition(
                self.splits["train"],
                PartitionSpec(cfg.train_ratios, derive_seed(cfg.seed, "partition-train"), True, cfg.class_skew),
            )
            val = partition(
                self.splits["validation"],
                PartitionSpec(cfg.validation_ratios, derive_seed(cfg.seed, "partition-val"), True, cfg.class_skew),
            )
            self._shards = (train, val)
        return self._shards

    def initial_params(self):
        return self.model.init_params(derive_seed(self.cfg.seed, "init"), self.cfg.init_scale)


# operational settings that may change between a run and its resumption
_UNPINNED = ("store_root", "poll_interval", "timeout")


def _pinned_fields(d: dict) -> dict:
    return {k: v for k, v in d.items() if k not in _UNPINNED}


def prepare_run(cfg: ExperimentConfig) -> int:
    """Create the run directory, pin the config, recover the phase record and
    publish the initial model if needed. Returns the last published round."""
    ctx = RunContext(cfg)
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    config_path = ctx.run_dir / "config.json"
    pinned = cfg.to_dict()
    if config_path.exists():
        existing = json.loads(config_path.read_text())
        if _pinned_fields(existing) != _pinned_fields(pinned):
            raise ConfigError(f"{config_path} was written by a different configuration; use a new run_id")
    else:
        config_path.write_text(json.dumps(pinned, indent=2, sort_keys=True) + "\n")
    last = recover_published_round(ctx.status, ctx.blob, cfg.run_id)
    if last < 0:
        publish_initial(ctx.status, ctx.blob, cfg.run_id, ctx.initial_params())
        last = 0
    return last


def run_server(cfg: ExperimentConfig, cancel: threading.Event | None = None) -> None:
    """Aggregate every round that is not yet published, then mark the run finished."""
    ctx = RunContext(cfg)
    run_id = cfg.run_id
    last = recover_published_round(ctx.status, ctx.blob, run_id)
    if last < 0:
        raise FedSimError("run not prepared: no initial global model")
    for t in range(last + 1, cfg.rounds + 1):
        digests = ctx.status.get_phase(run_id).global_digests
        ctx.status.put_phase(ServerPhase(run_id, t, "awaiting_clients", digests))
        updates = barrier_await_clients(
            ctx.status, ctx.blob, run_id, t, cfg.client_ids, cfg.poll_interval, cfg.timeout, cancel
        )
        ctx.status.put_phase(ServerPhase(run_id, t, "aggregating", digests))
        pv, report = aggregate(updates, cfg.aggregator)
        digest = publish_global_and_advance(ctx.status, ctx.blob, run_id, t, pv, report)
        log.info("round %d published %s (%s)", t, digest[:12], cfg.aggregator.strategy)
    final = ctx.status.get_phase(run_id)
    ctx.status.put_phase(ServerPhase(run_id, cfg.rounds, "finished", final.global_digests))


def _already_uploaded(ctx: RunContext, t: int, k: int) -> bool:
    rec = ctx.status.get_status(ctx.cfg.run_id, t, k)
    if rec is None or rec.state != "uploaded":
        return False
    path = ctx.blob.params_path(ctx.cfg.run_id, t, k)
    return path.exists() and digest_bytes(path.read_bytes()) == rec.params_digest


def run_client(cfg: ExperimentConfig, client_id: int, cancel: threading.Event | None = None) -> None:
    """Train and upload for every round this client has not finished yet."""
    ctx = RunContext(cfg)
    run_id = cfg.run_id
    train_shards, val_shards = ctx.shards()
    data, val = train_shards[client_id - 1], val_shards[client_id - 1]
    adversary = cfg.adversaries.get(client_id, HONEST)
    for t in range(1, cfg.rounds + 1):
        if _already_uploaded(ctx, t, client_id):
            continue
        global_pv = client_await_global(ctx.status, ctx.blob, run_id, t - 1, cfg.poll_interval, cfg.timeout, cancel)
        current = ctx.status.get_status(run_id, t, client_id)
        if current is None:
            ctx.status.put_status(RoundStatus(run_id, t, client_id, "assigned", len(data)))
        if current is None or current.state == "assigned":
            ctx.status.put_status(RoundStatus(run_id, t, client_id, "training", len(data)))
        local_cfg = dataclasses.replace(cfg.local, seed=derive_seed(cfg.seed, "train", t, client_id))
        try:
            result = local_train(ctx.model, global_pv, data, local_cfg, val)
        except DivergenceError:
            ctx.status.put_status(RoundStatus(run_id, t, client_id, "failed", len(data)))
            raise
        write_loss_csvs(ctx.blob.round_dir(run_id, t), client_id, result)
        update = ClientUpdate(client_id, result.params, len(data), result.validation_loss)
        update = apply_adversary(update, adversary, derive_seed(cfg.seed, "adversary", t, client_id))
        digest = ctx.blob.publish(run_id, t, client_id, update.params)
        ctx.status.put_status(
            RoundStatus(run_id, t, client_id, "uploaded", len(data), result.validation_loss, digest)
        )


def _run_inprocess(cfg: ExperimentConfig) -> None:
    cancel = threading.Event()
    errors: dict[str, BaseException] = {}

    def guarded(name, fn, *args):
        try:
            fn(*args, cancel)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the runner
            errors[name] = exc
            cancel.set()

    threads = [threading.Thread(target=guarded, args=("server", run_server, cfg), name="server")]
    for k in cfg.client_ids:
        threads.append(threading.Thread(target=guarded, args=(f"client_{k}", run_client, cfg, k), name=f"client_{k}"))
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        # prefer the root cause over roles that merely stopped waiting
        real = {k: v for k, v in errors.items() if not isinstance(v, CancelledError)} or errors
        raise real.get("server") or next(iter(real.values()))


@dataclass
class KillPlan:
    """Kill one client process after ``delay`` seconds and start it again."""

    client_id: int
    delay: float
    killed_while_running: bool = False


def _worker_cmd(config_path: Path, role: str, client_id: int | None = None) -> list[str]:
    cmd = [sys.executable, "-m", "fedsim.cli", "worker", "--config", str(config_path), "--role", role]
    if client_id is not None:
        cmd += ["--client-id", str(client_id)]
    return cmd


def _run_multiprocess(cfg: ExperimentConfig, kill: KillPlan | None = None) -> None:
    config_path = RunContext(cfg).run_dir / "config.json"
    procs = {"server": subprocess.Popen(_worker_cmd(config_path, "server"), stderr=subprocess.PIPE)}
    for k in cfg.client_ids:
        procs[f"client_{k}"] = subprocess.Popen(_worker_cmd(config_path, "client", k), stderr=subprocess.PIPE)
    started = time.monotonic()
    pending_kill = kill
    try:
        while True:
            if pending_kill is not None and time.monotonic() - started >= pending_kill.delay:
                name = f"client_{pending_kill.client_id}"
                proc = procs[name]
                pending_kill.killed_while_running = proc.poll() is None
                if pending_kill.killed_while_running:
                    proc.send_signal(signal.SIGKILL)
                    proc.wait()
                procs[name] = subprocess.Popen(
                    _worker_cmd(config_path, "client", pending_kill.client_id), stderr=subprocess.PIPE
                )
                log.info("killed and restarted %s", name)
                pending_kill = None
            codes = {name: p.poll() for name, p in procs.items()}
            failed = {name: c for name, c in codes.items() if c not in (None, 0)}
            if failed:
                name = "server" if "server" in failed else next(iter(failed))
                err = procs[name].stderr.read().decode(errors="replace").strip().splitlines()
                raise FedSimError(f"{name} exited with code {failed[name]}: {err[-1] if err else ''}")
            if all(c == 0 for c in codes.values()) and pending_kill is None:
                return
            time.sleep(0.02)
    finally:
        for p in procs.values():
            if p.poll() is None:
                p.kill()
            p.wait()
            p.stderr.close()


def evaluate_run(cfg: ExperimentConfig) -> dict:
    """Score every published global model and write summary/metrics artifacts."""
    ctx = RunContext(cfg)
    run_id = cfg.run_id
    val = ctx.splits["validation"]
    test = ctx.splits["test"]
    phase = ctx.status.get_phase(run_id)
    globals_ = {}
    val_losses = []
    rounds = []
    for t in range(cfg.rounds + 1):
        pv = ctx.blob.fetch(run_id, t, "global", expected_digest=phase.global_digests[str(t)])
        globals_[t] = pv
        val_losses.append(ctx.model.forward_loss(pv, val))
        entry = {"round": t, "global_digest": phase.global_digests[str(t)], "global_val_loss": val_losses[-1]}
        if t > 0:
            report = ctx.status.get_report(run_id, t).to_dict()
            entry["aggregation"] = {k: v for k, v in report.items() if k in ("weights", "scores", "selected_client")}
            entry["client_validation_loss"] = {
                str(k): ctx.status.get_status(run_id, t, k).validation_loss for k in cfg.client_ids
            }
        rounds.append(entry)
    final = globals_[cfg.rounds]
    decoded = ctx.model.greedy_decode(final, test.features)
    candidates = [token_strings(row) for row in decoded]
    references = [token_strings(row) for row in test.tokens]
    write_decodes(ctx.run_dir / "decodes.csv", test.sample_ids, candidates, references)
    report = evaluate_corpus(list(zip(candidates, references)), cfg.bleu_max_n)
    write_metrics_json(ctx.run_dir / "metrics.json", report)
    write_metrics_csv(ctx.run_dir / "metrics.csv", [(cfg.aggregator.strategy, report.corpus)])
    client_params = {
        f"round_{t}/client_{k}": ctx.status.get_status(run_id, t, k).params_digest
        for t in range(1, cfg.rounds + 1)
        for k in cfg.client_ids
    }
    summary = {
        "run_id": run_id,
        "strategy": cfg.aggregator.strategy,
        "num_clients": cfg.num_clients,
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "adversaries": {str(k): str(v) for k, v in sorted(cfg.adversaries.items())},
        "round_results": rounds,
        "client_param_digests": client_params,
        "final_global_val_loss": val_losses[-1],
        "metrics": report.corpus,
    }
    (ctx.run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def write_decodes(path, sample_ids, candidates, references) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "candidate", "reference"])
        for sid, c, r in zip(sample_ids, candidates, references):
            w.writerow([int(sid), " ".join(c), " ".join(r)])


def read_decodes(path) -> list[tuple[list[str], list[str]]]:
    with Path(path).open(newline="") as fh:
        return [(r["candidate"].split(), r["reference"].split()) for r in csv.DictReader(fh)]


def run_experiment(cfg: ExperimentConfig, mode: str = "inprocess", kill: KillPlan | None = None) -> dict:
    """Run (or resume) all rounds, then evaluate. Returns the summary dict."""
    if mode not in ("inprocess", "multiprocess"):
        raise ConfigError(f"unknown mode {mode!r}")
    if kill is not None and mode != "multiprocess":
        raise ConfigError("process kills need multiprocess mode")
    prepare_run(cfg)
    if mode == "inprocess":
        _run_inprocess(cfg)
    else:
        _run_multiprocess(cfg, kill)
    return evaluate_run(cfg)


def compare_strategies(cfg: ExperimentConfig, strategies, mode: str = "inprocess") -> list[dict]:
    """Run one experiment per strategy from identical seeds and data.

    Each strategy runs as ``<run_id>-<strategy>``; the table is written to
    ``runs/<run_id>/comparison.csv``.
    """
    if not strategies:
        raise ConfigError("no strategies to compare")
    rows = []
    for name in strategies:
        sub = cfg.replace(
            run_id=f"{cfg.run_id}-{name}",
            aggregator=dataclasses.replace(cfg.aggregator, strategy=name),
        )
        summary = run_experiment(sub, mode)
        row = {"approach": name, **summary["metrics"], "final_val_loss": summary["final_global_val_loss"]}
        row["global_digests"] = [r["global_digest"] for r in summary["round_results"]]
        rows.append(row)
    out_dir = BlobStore(cfg.store_root).run_dir(cfg.run_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(
        out_dir / "comparison.csv", [(r["approach"], r) for r in rows], extra_columns=("final_val_loss",)
    )
    return rows


