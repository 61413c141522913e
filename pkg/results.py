#!/usr/bin/env python3
"""Run manifest, verification and plain-text report for a launcher run directory.

Layout of a run directory::

    reply.json                       coordinator reply, verbatim
    manifest.json                    this module's RunManifest
    report.txt                       summarize(manifest)
    <namespace>/<pod>/<container>/   extracted result files, byte-exact
"""

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import click
from jinja2 import Template
from pydantic import BaseModel, ConfigDict, Field

from config import err_console
from protocol import DeployReply, PodStatus, Verdict

HASH_ALGORITHM = "sha256"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.txt"
REPLY_FILE = "reply.json"


class InventoryMismatch(Exception):
    """Files on disk disagree with the manifest."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class ContainerExtraction:
    """What extraction produced for one test container."""

    namespace: str
    pod_name: str
    container_name: str
    files: list[str] = field(default_factory=list)
    error: Optional[str] = None
    note: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.namespace, self.pod_name, self.container_name)


@dataclass
class Deletion:
    namespace: str
    pod_name: str
    ok: bool
    detail: str = ""


class _Entry(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True)


class FileEntry(_Entry):
    path: str
    size: int
    hash: str


class ContainerEntry(_Entry):
    name: str
    verdict: Verdict
    exit_code: Optional[int] = Field(default=None, alias="exitCode")
    files: list[FileEntry] = Field(default_factory=list)
    note: str = ""
    error: Optional[str] = None


class PodEntry(_Entry):
    pod_name: str = Field(alias="podName")
    namespace: str
    status: PodStatus
    containers: list[ContainerEntry]


class DeletionEntry(_Entry):
    pod_name: str = Field(alias="podName")
    namespace: str
    ok: bool
    detail: str = ""


class RunManifest(_Entry):
    hash_algorithm: str = Field(default=HASH_ALGORITHM, alias="hashAlgorithm")
    run_id: str = Field(alias="runId")
    config_digest: str = Field(alias="configDigest")
    reply_code: Optional[str] = Field(default=None, alias="replyCode")
    error: Optional[str] = None
    exit_code: Optional[int] = Field(default=None, alias="exitCode")
    pods: list[PodEntry] = Field(default_factory=list)
    deletions: list[DeletionEntry] = Field(default_factory=list)
    created_at: str = Field(alias="createdAt")

    @property
    def passed(self) -> bool:
        containers = [c for pod in self.pods for c in pod.containers]
        return bool(containers) and all(c.verdict == Verdict.PASSED for c in containers)


def file_digest(path: Path) -> str:
    digest = hashlib.new(HASH_ALGORITHM)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(
    reply: Optional[DeployReply],
    inventory: dict[tuple[str, str, str], ContainerExtraction],
    deletions: list[Deletion],
    run_id: str,
    config_digest: str,
    run_dir: Path,
    error: Optional[str] = None,
    exit_code: Optional[int] = None,
    created_at: Optional[datetime] = None,
) -> RunManifest:
    """Record verdicts, hashed file inventory and deletions for one run.

    Raises InventoryMismatch if an inventory file is missing under ``run_dir``.
    """
    missing = []
    pods = []
    for pod in reply.pods if reply is not None else []:
        containers = []
        for result in pod.containers:
            extraction = inventory.get((pod.namespace, pod.pod_name, result.container_name))
            entries = []
            for relative in sorted(extraction.files if extraction else []):
                target = run_dir / relative
                if not target.is_file():
                    missing.append(f"{relative}: listed file is missing")
                    continue
                entries.append(FileEntry(path=relative, size=target.stat().st_size, hash=file_digest(target)))
            containers.append(
                ContainerEntry(
                    name=result.container_name,
                    verdict=result.verdict,
                    exit_code=result.exit_code,
                    files=entries,
                    note=extraction.note if extraction else "",
                    error=extraction.error if extraction else None,
                )
            )
        pods.append(PodEntry(pod_name=pod.pod_name, namespace=pod.namespace, status=pod.status, containers=containers))
    if missing:
        raise InventoryMismatch(missing)

    return RunManifest(
        run_id=run_id,
        config_digest=config_digest,
        reply_code=reply.code.value if reply is not None else None,
        error=error,
        exit_code=exit_code,
        pods=pods,
        deletions=[
            DeletionEntry(pod_name=d.pod_name, namespace=d.namespace, ok=d.ok, detail=d.detail) for d in deletions
        ],
        created_at=(created_at or datetime.now(timezone.utc)).isoformat(timespec="seconds"),
    )


def verify_manifest(manifest: RunManifest, run_dir: Path) -> None:
    """Re-check every listed file's size and hash; raise InventoryMismatch on any drift."""
    if manifest.hash_algorithm != HASH_ALGORITHM:
        raise InventoryMismatch([f"unsupported hash algorithm {manifest.hash_algorithm!r}"])
    problems = []
    for pod in manifest.pods:
        for container in pod.containers:
            for entry in container.files:
                target = run_dir / entry.path
                if not target.is_file():
                    problems.append(f"{entry.path}: missing")
                elif target.stat().st_size != entry.size:
                    problems.append(f"{entry.path}: size {target.stat().st_size} != {entry.size}")
                elif file_digest(target) != entry.hash:
                    problems.append(f"{entry.path}: content hash changed")
    if problems:
        raise InventoryMismatch(problems)


def manifest_bytes(manifest: RunManifest) -> bytes:
    payload = manifest.model_dump(mode="json", by_alias=True)
    return json.dumps(payload, indent=2, sort_keys=True).encode("utf-8") + b"\n"


def write_manifest(manifest: RunManifest, run_dir: Path) -> Path:
    path = run_dir / MANIFEST_FILE
    path.write_bytes(manifest_bytes(manifest))
    return path


def load_manifest(run_dir: Path) -> RunManifest:
    with open(run_dir / MANIFEST_FILE) as f:
        return RunManifest.model_validate(json.load(f))


REPORT_TEMPLATE = Template(
    """bunk8s run {{ run_id }}
{% if error %}error: {{ error }}
{% endif %}{% if rows %}{{ header }}
{% for row in rows %}{{ row }}
{% endfor %}{% else %}no test results
{% endif %}{% for d in failed_deletions %}cleanup failed: {{ d.namespace }}/{{ d.pod_name }}: {{ d.detail }}
{% endfor %}OVERALL: {{ overall }}
""",
    keep_trailing_newline=True,
)


def summarize(manifest: RunManifest) -> str:
    """Plain-text verdict table, failing containers first."""
    rows = []
    for pod in manifest.pods:
        for container in pod.containers:
            rows.append((
                container.verdict != Verdict.PASSED,
                f"{pod.namespace}/{pod.pod_name}/{container.name}",
                container.verdict.value,
                "-" if container.exit_code is None else str(container.exit_code),
                str(len(container.files)),
            ))
    # Stable sort keeps request order within each group.
    rows.sort(key=lambda row: not row[0])
    columns = ("CONTAINER", "VERDICT", "EXIT", "FILES")
    widths = [max([len(columns[i])] + [len(row[i + 1]) for row in rows]) for i in range(len(columns))]

    def line(cells) -> str:
        return "  ".join(cell.ljust(width) for cell, width in zip(cells, widths)).rstrip()

    return REPORT_TEMPLATE.render(
        run_id=manifest.run_id,
        error=manifest.error,
        header=line(columns),
        rows=[line(row[1:]) for row in rows],
        failed_deletions=[d for d in manifest.deletions if not d.ok],
        overall="PASS" if manifest.passed else "FAIL",
    )


def write_report(manifest: RunManifest, run_dir: Path) -> Path:
    path = run_dir / REPORT_FILE
    path.write_text(summarize(manifest))
    return path


@click.group()
def cli():
    """Inspect bunk8s run directories."""
    pass


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
def verify(run_dir: Path):
    """Check every result file against manifest.json.

    Examples:
        python results.py verify out/
    """
    try:
        verify_manifest(load_manifest(run_dir), run_dir)
    except (OSError, ValueError) as e:
        err_console.print(f"[red]Cannot read manifest: {e}[/red]")
        raise SystemExit(2)
    except InventoryMismatch as e:
        for problem in e.problems:
            err_console.print(f"[red]{problem}[/red]")
        raise SystemExit(1)
    err_console.print("[green]All result files match the manifest[/green]")


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
def report(run_dir: Path):
    """Re-render report.txt from manifest.json and print it."""
    manifest = load_manifest(run_dir)
    write_report(manifest, run_dir)
    click.echo(summarize(manifest), nl=False)


if __name__ == "__main__":
    cli()
