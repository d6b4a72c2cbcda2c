"""Background job registry: one worker thread per submitted run.

The registry owns no training logic. A job target receives (progress,
should_stop) and returns a JSON-ready result dict whose optional "state" key
("done"/"cancelled") becomes the job's final state.
"""

import threading
import uuid
from dataclasses import dataclass, field


@dataclass
class Job:
    id: str
    kind: str
    state: str = "queued"  # queued | running | done | cancelled | error
    rows: list = field(default_factory=list)
    result: dict = None
    error: str = None
    thread: threading.Thread = None
    stop_event: threading.Event = field(default_factory=threading.Event)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def info(self) -> dict:
        with self.lock:
            return {
                "id": self.id,
                "kind": self.kind,
                "state": self.state,
                "epochs_done": len(self.rows),
                "last_row": self.rows[-1] if self.rows else None,
                "result": self.result,
                "error": self.error,
            }

    def metrics(self) -> list:
        with self.lock:
            return list(self.rows)


class JobRegistry:
    def __init__(self):
        self._jobs = {}
        self._lock = threading.Lock()

    def submit(self, kind, target) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], kind=kind)

        def progress(row):
            with job.lock:
                job.rows.append(row)

        def worker():
            with job.lock:
                job.state = "running"
            try:
                result = target(progress, job.stop_event.is_set)
                with job.lock:
                    job.result = result
                    job.state = result.get("state", "done") if result else "done"
            except Exception as exc:  # surfaced through the job info
                with job.lock:
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.state = "error"

        job.thread = threading.Thread(target=worker, daemon=True)
        with self._lock:
            self._jobs[job.id] = job
        job.thread.start()
        return job

    def get(self, job_id) -> Job:
        with self._lock:
            return self._jobs.get(job_id)

    def all(self):
        with self._lock:
            return list(self._jobs.values())

    def cancel(self, job_id) -> Job:
        job = self.get(job_id)
        if job is not None:
            job.stop_event.set()
        return job
