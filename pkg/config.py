"""Process settings for the bunk8s launcher and coordinator."""

import logging
import os

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

# Load environment variables from .env file
load_dotenv()

DEFAULT_SIDECAR_IMAGE = "busybox:1.36"
SIDECAR_COMMAND = ["sh", "-c", "trap 'exit 0' TERM; sleep infinity & wait"]

# All human-facing output goes to stderr; stdout is reserved for script output.
err_console = Console(stderr=True)


class Config:
    """Application configuration read from the environment."""

    @property
    def sidecar_image(self) -> str:
        return os.getenv("BUNK8S_SIDECAR_IMAGE") or DEFAULT_SIDECAR_IMAGE

    @property
    def sidecar_command(self) -> list[str]:
        return list(SIDECAR_COMMAND)

    @property
    def tls_cert(self) -> str:
        return os.getenv("BUNK8S_TLS_CERT", "")

    @property
    def tls_key(self) -> str:
        return os.getenv("BUNK8S_TLS_KEY", "")

    @property
    def bind_address(self) -> str:
        return os.getenv("BUNK8S_BIND", "0.0.0.0:8080")

    @property
    def kube_context(self) -> str | None:
        """Kubeconfig context used outside the cluster; None means the current one."""
        return os.getenv("BUNK8S_KUBE_CONTEXT") or None

    @property
    def watch_retries(self) -> int:
        try:
            return max(0, int(os.getenv("BUNK8S_WATCH_RETRIES", "3")))
        except ValueError:
            return 3

    @property
    def log_level(self) -> str:
        return os.getenv("BUNK8S_LOG_LEVEL", "INFO").upper()

    def has_tls(self) -> bool:
        """Check if the coordinator should serve HTTPS."""
        return bool(self.tls_cert and self.tls_key)


def setup_logging(level: str | None = None) -> None:
    """Route all log records through rich on standard error."""
    logging.basicConfig(
        level=level or config.log_level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


# Global config instance
config = Config()
