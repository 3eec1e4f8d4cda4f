"""
Density-weighted residual alignment laboratory.

Long runs happen off the main thread so that Ctrl+C stays responsive: the
main thread only waits, and an interruption asks the worker to stop
scheduling new cells once the running ones are done.
"""
import logging
import threading
from typing import TYPE_CHECKING, Any, Callable, Optional

if TYPE_CHECKING:
    from .console import Application  # noqa

log = logging.getLogger(__name__)

# Seconds between two checks of the worker thread
POLL = 0.5

Task = Callable[[Callable[[str], None], Callable[[], bool]], Any]


class Worker:
    def __init__(self, app: "Application", task: Task):
        self.app = app
        self.task = task

        self.need_to_run = True
        self.result: Any = None
        self.error: Optional[BaseException] = None

        self.thr = threading.Thread(target=self.run, name="heedlab-worker")
        self.thr.start()

    def run(self) -> None:
        """Run the task once, keeping its result or its error for the application."""
        try:
            self.result = self.task(self.app.output, self.should_continue)
        except Exception as exc:
            log.debug("worker task failed", exc_info=True)
            self.error = exc

    def should_continue(self) -> bool:
        return self.need_to_run

    def wait(self) -> None:
        """Join the thread in small steps so KeyboardInterrupt reaches the main thread."""
        while self.thr.is_alive():
            self.thr.join(POLL)
