"""Synchronous round protocol over a shared directory.

Layout under the store root::

    runs/<run_id>/server.phase.json
    runs/<run_id>/round_<t>/global.params
    runs/<run_id>/round_<t>/aggregation.json
    runs/<run_id>/round_<t>/client_<k>.params
    runs/<run_id>/round_<t>/client_<k>.status.json

Round 0 holds only the initial global model. In round ``t >= 1`` clients
train from the round ``t - 1`` global model, upload their parameters and mark
themselves ``uploaded``; the server waits for all of them, aggregates and
publishes ``round_<t>/global.params``. Every file is written to a temporary
name and renamed into place, so readers never see a partial record.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fedsim.aggregation import AggregationReport, ClientUpdate
from fedsim.errors import (
    BarrierTimeoutError,
    CancelledError,
    IntegrityError,
    ProtocolOrderError,
    RoundFailedError,
    StoreTimeoutError,
)
from fedsim.params import ParamVector, deserialize, digest_bytes, serialize

DEFAULT_POLL_INTERVAL = 0.2

CLIENT_STATES = ("assigned", "training", "uploaded", "failed")
SERVER_PHASES = ("distributing", "awaiting_clients", "aggregating", "published", "finished")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class RunLayout:
    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def round_dir(self, run_id: str, round_: int) -> Path:
        return self.run_dir(run_id) / f"round_{round_}"

    def params_path(self, run_id: str, round_: int, owner) -> Path:
        name = "global" if owner == "global" else f"client_{int(owner)}"
        return self.round_dir(run_id, round_) / f"{name}.params"

    def status_path(self, run_id: str, round_: int, client_id: int) -> Path:
        return self.round_dir(run_id, round_) / f"client_{client_id}.status.json"

    def report_path(self, run_id: str, round_: int) -> Path:
        return self.round_dir(run_id, round_) / "aggregation.json"

    def phase_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "server.phase.json"


class BlobStore(RunLayout):
    """Parameter blobs keyed by (run, round, owner)."""

    def publish(self, run_id: str, round_: int, owner, pv: ParamVector) -> str:
        data = serialize(pv)
        digest = digest_bytes(data)
        path = self.params_path(run_id, round_, owner)
        if path.exists() and digest_bytes(path.read_bytes()) == digest:
            return digest
        atomic_write(path, data)
        if digest_bytes(path.read_bytes()) != digest:
            raise IntegrityError(f"verify-after-write failed for {path}")
        return digest

    def exists(self, run_id: str, round_: int, owner) -> bool:
        return self.params_path(run_id, round_, owner).exists()

    def fetch(self, run_id: str, round_: int, owner, expected_digest: str | None = None) -> ParamVector:
        path = self.params_path(run_id, round_, owner)
        data = path.read_bytes()
        if expected_digest is not None and digest_bytes(data) != expected_digest:
            raise IntegrityError(
                f"{path} has digest {digest_bytes(data)[:12]}..., expected {expected_digest[:12]}..."
            )
        return deserialize(data)


@dataclass
class RoundStatus:
    run_id: str
    round: int
    client_id: int
    state: str
    data_length: int = 0
    validation_loss: float = 0.0
    params_digest: str = ""
    timestamp: str = field(default_factory=utc_now)

    def __post_init__(self):
        if self.state not in CLIENT_STATES:
            raise ValueError(f"unknown client state {self.state!r}")


@dataclass
class ServerPhase:
    run_id: str
    round: int
    phase: str
    # round -> digest of every published global model, so clients can verify downloads
    global_digests: dict = field(default_factory=dict)
    timestamp: str = field(default_factory=utc_now)

    def __post_init__(self):
        if self.phase not in SERVER_PHASES:
            raise ValueError(f"unknown server phase {self.phase!r}")
        self.global_digests = {str(k): v for k, v in self.global_digests.items()}


def _state_rank(state: str) -> int:
    return CLIENT_STATES.index(state)


class StatusStore(RunLayout):
    """Small JSON records, one writer per key by protocol construction."""

    def _write_json(self, path: Path, record: dict) -> None:
        atomic_write(path, (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())

    def _read_json(self, path: Path):
        try:
            return json.loads(path.read_text())
        except FileNotFoundError:
            return None

    def get_status(self, run_id: str, round_: int, client_id: int) -> RoundStatus | None:
        rec = self._read_json(self.status_path(run_id, round_, client_id))
        return RoundStatus(**rec) if rec else None

    def put_status(self, status: RoundStatus) -> None:
        """Write a client record; states only move forward (re-writing the same state is allowed)."""
        current = self.get_status(status.run_id, status.round, status.client_id)
        if current is not None and current.state != status.state:
            if current.state in ("uploaded", "failed") or (
                status.state != "failed" and _state_rank(status.state) < _state_rank(current.state)
            ):
                raise ProtocolOrderError(
                    f"client {status.client_id} round {status.round}: "
                    f"cannot move from {current.state} to {status.state}"
                )
        if status.state == "uploaded":
            blob = BlobStore(self.root)
            path = blob.params_path(status.run_id, status.round, status.client_id)
            if not path.exists() or digest_bytes(path.read_bytes()) != status.params_digest:
                raise IntegrityError(f"uploaded status for {path} does not match the stored blob")
        self._write_json(self.status_path(status.run_id, status.round, status.client_id), asdict(status))

    def get_phase(self, run_id: str) -> ServerPhase | None:
        rec = self._read_json(self.phase_path(run_id))
        return ServerPhase(**rec) if rec else None

    def put_phase(self, phase: ServerPhase, reset: bool = False) -> None:
        """Advance the server phase; ``reset`` bypasses ordering for crash recovery."""
        current = self.get_phase(phase.run_id)
        if current is not None and not reset:
            backwards = phase.round < current.round or (
                phase.round == current.round
                and SERVER_PHASES.index(phase.phase) < SERVER_PHASES.index(current.phase)
            )
            if backwards:
                raise ProtocolOrderError(
                    f"server phase cannot move from round {current.round}/{current.phase} "
                    f"to round {phase.round}/{phase.phase}"
                )
        self._write_json(self.phase_path(phase.run_id), asdict(phase))

    def put_report(self, run_id: str, round_: int, report: AggregationReport) -> None:
        atomic_write(self.report_path(run_id, round_), (report.to_json() + "\n").encode())

    def get_report(self, run_id: str, round_: int) -> AggregationReport | None:
        rec = self._read_json(self.report_path(run_id, round_))
        return AggregationReport.from_dict(rec) if rec else None


def _poll(check, poll_interval: float, timeout: float, cancel: threading.Event | None = None):
    """Call ``check()`` until it returns something other than None."""
    deadline = time.monotonic() + timeout
    while True:
        result = check()
        if result is not None:
            return result
        if cancel is not None and cancel.is_set():
            # one last look so a record written just before the cancel is not missed
            result = check()
            if result is not None:
                return result
            raise CancelledError("cancelled while waiting")
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        time.sleep(min(poll_interval, remaining))


def publish_params(store: BlobStore, run_id: str, round_: int, owner, pv: ParamVector) -> str:
    return store.publish(run_id, round_, owner, pv)


def publish_initial(status: StatusStore, blob: BlobStore, run_id: str, pv: ParamVector) -> str:
    """Publish the round-0 global model (the starting point of round 1)."""
    status.put_phase(ServerPhase(run_id, 0, "distributing"))
    digest = blob.publish(run_id, 0, "global", pv)
    status.put_phase(ServerPhase(run_id, 0, "published", {0: digest}))
    return digest


def barrier_await_clients(
    status: StatusStore,
    blob: BlobStore,
    run_id: str,
    round_: int,
    expected,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    timeout: float = 300.0,
    cancel: threading.Event | None = None,
) -> list[ClientUpdate]:
    """Block until every expected client has uploaded for ``round_``.

    Raises :class:`RoundFailedError` as soon as any client reports failure and
    :class:`BarrierTimeoutError` naming the missing clients on timeout.
    """
    expected = sorted(set(expected))
    records: dict[int, RoundStatus] = {}

    def check():
        failed = []
        for k in expected:
            if k in records:
                continue
            rec = status.get_status(run_id, round_, k)
            if rec is None:
                continue
            if rec.state == "failed":
                failed.append(k)
            elif rec.state == "uploaded":
                records[k] = rec
        if failed:
            raise RoundFailedError(round_, failed)
        return True if len(records) == len(expected) else None

    if _poll(check, poll_interval, timeout, cancel) is None:
        raise BarrierTimeoutError(round_, [k for k in expected if k not in records])
    updates = []
    for k in expected:
        rec = records[k]
        pv = blob.fetch(run_id, round_, k, expected_digest=rec.params_digest)
        updates.append(ClientUpdate(k, pv, rec.data_length, rec.validation_loss))
    return updates


def publish_global_and_advance(
    status: StatusStore,
    blob: BlobStore,
    run_id: str,
    round_: int,
    pv: ParamVector,
    report: AggregationReport,
) -> str:
    phase = status.get_phase(run_id)
    if phase is None or phase.round != round_ or phase.phase != "aggregating":
        where = "no phase record" if phase is None else f"round {phase.round}/{phase.phase}"
        raise ProtocolOrderError(f"cannot publish round {round_} global model at {where}")
    if str(round_) in phase.global_digests:
        raise ProtocolOrderError(f"round {round_} global model was already published")
    digest = blob.publish(run_id, round_, "global", pv)
    report.round = round_
    if report.params_digest != digest:
        raise IntegrityError("aggregation report digest does not match the published global model")
    status.put_report(run_id, round_, report)
    digests = dict(phase.global_digests)
    digests[str(round_)] = digest
    status.put_phase(ServerPhase(run_id, round_, "published", digests))
    return digest


def client_await_global(
    status: StatusStore,
    blob: BlobStore,
    run_id: str,
    round_: int,
    poll_interval: float = DEFAULT_POLL_INTERVAL,
    timeout: float = 300.0,
    cancel: threading.Event | None = None,
) -> ParamVector:
    """Wait for the round ``round_`` global model and return it, digest-checked."""
    if round_ < 0:
        raise ValueError("round must be >= 0")

    def check():
        phase = status.get_phase(run_id)
        if phase is None:
            return None
        digest = phase.global_digests.get(str(round_))
        if digest is None or not blob.exists(run_id, round_, "global"):
            return None
        return digest

    digest = _poll(check, poll_interval, timeout, cancel)
    if digest is None:
        raise StoreTimeoutError(f"timed out waiting for the round {round_} global model")
    return blob.fetch(run_id, round_, "global", expected_digest=digest)


def recover_published_round(status: StatusStore, blob: BlobStore, run_id: str) -> int:
    """Rebuild the phase record from what is on disk and return the last
    consecutively published round (-1 when not even round 0 exists).

    A round counts as published when its global blob exists and, for rounds
    after 0, its aggregation report names that blob's digest.
    """
    digests = {}
    t = 0
    while blob.exists(run_id, t, "global"):
        data = blob.params_path(run_id, t, "global").read_bytes()
        digest = digest_bytes(data)
        if t > 0:
            report = status.get_report(run_id, t)
            if report is None or report.params_digest != digest:
                break
        digests[t] = digest
        t += 1
    last = t - 1
    if last >= 0:
        status.put_phase(ServerPhase(run_id, last, "published", digests), reset=True)
    elif status.get_phase(run_id) is not None:
        status.phase_path(run_id).unlink()
    return last
