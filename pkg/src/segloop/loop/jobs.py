"""Background job execution: one worker per project, so training never blocks
annotation reads/writes, and at most one train-kind job exists at a time."""
from __future__ import annotations

import queue
import threading
import time
import uuid
from dataclasses import dataclass, field

from ..errors import BusyError, NotFoundError

TRAIN_KINDS = {"pretrain", "finetune"}
KINDS = TRAIN_KINDS | {"predict", "embed"}


@dataclass
class TrainingJob:
    job_id: str
    project_id: str
    kind: str
    state: str = "queued"  # queued -> running -> done | failed | cancelled
    progress: float = 0.0
    started_at: int | None = None
    ended_at: int | None = None
    result_checkpoint: str | None = None
    error: str | None = None
    cancel_requested: bool = field(default=False, repr=False)

    def snapshot(self) -> dict:
        return {
            "job_id": self.job_id, "project_id": self.project_id,
            "kind": self.kind, "state": self.state,
            "progress": round(self.progress, 4),
            "started_at": self.started_at, "ended_at": self.ended_at,
            "result_checkpoint": self.result_checkpoint, "error": self.error,
        }


class JobManager:
    """Submission returns immediately; jobs of one project run FIFO on that
    project's worker thread. A second concurrent train-kind job is rejected."""

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, TrainingJob] = {}
        self._queues: dict[str, queue.Queue] = {}

    def _worker(self, q: queue.Queue):
        while True:
            item = q.get()
            if item is None:
                return
            job, fn = item
            with self._lock:
                if job.cancel_requested:
                    job.state = "cancelled"
                    job.ended_at = int(time.time() * 1000)
                    continue
                job.state = "running"
                job.started_at = int(time.time() * 1000)

            def set_progress(p, job=job):
                job.progress = min(1.0, max(0.0, float(p)))

            def should_stop(job=job):
                return job.cancel_requested

            try:
                result = fn(set_progress, should_stop)
            except Exception as exc:  # job errors land in status, not the log
                with self._lock:
                    job.state = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.ended_at = int(time.time() * 1000)
                continue
            with self._lock:
                if job.cancel_requested:
                    job.state = "cancelled"
                else:
                    job.state = "done"
                    job.progress = 1.0
                    if isinstance(result, str):
                        job.result_checkpoint = result
                job.ended_at = int(time.time() * 1000)

    def submit(self, project_id: str, kind: str, fn) -> TrainingJob:
        """fn(progress_cb, should_stop) runs on the project worker; if it
        returns a string it is recorded as the produced checkpoint id."""
        if kind not in KINDS:
            raise ValueError(f"unknown job kind {kind!r}")
        with self._lock:
            if kind in TRAIN_KINDS:
                for j in self._jobs.values():
                    if (j.project_id == project_id and j.kind in TRAIN_KINDS
                            and j.state in ("queued", "running")):
                        raise BusyError(
                            f"a {j.kind} job is already {j.state} for this project")
            job = TrainingJob(job_id=uuid.uuid4().hex[:12], project_id=project_id,
                              kind=kind)
            self._jobs[job.job_id] = job
            # two lanes per project: training serializes with itself while
            # embed/predict jobs keep flowing on the auxiliary worker
            lane = (project_id, "train" if kind in TRAIN_KINDS else "aux")
            if lane not in self._queues:
                q = queue.Queue()
                self._queues[lane] = q
                threading.Thread(target=self._worker, args=(q,), daemon=True).start()
            self._queues[lane].put((job, fn))
        return job

    def job_status(self, job_id: str) -> TrainingJob:
        with self._lock:
            if job_id not in self._jobs:
                raise NotFoundError(f"no such job: {job_id}")
            return self._jobs[job_id]

    def cancel(self, job_id: str) -> TrainingJob:
        """Queued jobs cancel before they start; running jobs stop at the
        next batch boundary."""
        with self._lock:
            if job_id not in self._jobs:
                raise NotFoundError(f"no such job: {job_id}")
            job = self._jobs[job_id]
            if job.state in ("queued", "running"):
                job.cancel_requested = True
                if job.state == "queued":
                    job.state = "cancelled"
                    job.ended_at = int(time.time() * 1000)
        return job

    def jobs_for(self, project_id: str) -> list[TrainingJob]:
        with self._lock:
            return [j for j in self._jobs.values() if j.project_id == project_id]

    def wait(self, job_id: str, timeout: float = 600.0) -> TrainingJob:
        """Poll until the job leaves queued/running. Test and CLI convenience."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            job = self.job_status(job_id)
            if job.state not in ("queued", "running"):
                return job
            time.sleep(0.01)
        raise TimeoutError(f"job {job_id} still {self.job_status(job_id).state}")
