"""
Density-weighted residual alignment laboratory.

Console front-end of the long-running commands.
"""
from typing import Any

from . import __version__
from .constants import APP_NAME
from .worker import Task, Worker


class Application:
    def __init__(self, title: str, task: Task):
        self.title = title
        self.result: Any = None

        self.worker = Worker(self, task)

    def exec_(self) -> int:
        """
        Wait for the worker and return the exit code. Errors of the task are
        raised again here, on the main thread.
        """

        print(f"{APP_NAME} v{__version__}: {self.title}", flush=True)

        try:
            self.worker.wait()
        except KeyboardInterrupt:
            self.output("Interrupted, waiting for the running cells to finish ...")
            self.worker.need_to_run = False
            self.worker.wait()
            return 1

        if self.worker.error is not None:
            raise self.worker.error
        self.result = self.worker.result
        return 0

    def output(self, msg: str) -> None:
        """Print some text in the console."""
        print(msg, flush=True)
