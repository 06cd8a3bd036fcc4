from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from odflow.config import RunConfig, dump_config
from odflow.utils.logger import logger

CONFIG_ECHO = "run_config.yaml"


class Runtime:
    def __init__(self, out_dir: str | Path, threads: int = 1):
        """Initialize the Runtime with an output directory and a worker count.
        The output directory is created on demand.
        """

        self.out_dir = Path(out_dir)
        self.threads = threads
        self._pool = None

        self.validate()

    def validate(self):
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}.")
        if self.out_dir.exists() and not self.out_dir.is_dir():
            raise ValueError(f"output path {self.out_dir} exists and is not a directory.")

    def __enter__(self) -> "Runtime":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def map(self, fn, items):
        """Apply `fn` to every item; results come back in input order."""
        items = list(items)
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def echo_config(self, config: RunConfig) -> Path:
        """Write the effective config so the run can be reproduced with --config."""
        target = self.path(CONFIG_ECHO)
        dump_config(config, target)
        logger.debug(f"Effective config written to {target}")
        return target
