#!/usr/bin/env python3
"""bunk8s launcher - drives one integration test run from a CI pipeline.

This script:
1. Parses the run configuration
2. Sends it to the coordinator and waits for the reply
3. Stores the reply as reply.json
4. Copies result files out of every pod's result sidecar
5. Deletes the test runner pods
6. Writes manifest.json and report.txt, then exits with a CI-meaningful code
"""

import hashlib
import logging
import shutil
import tarfile
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional, Protocol

import click
import requests
from rich.table import Table

from cluster import ClusterBackend, ClusterError, sidecar_path, unpack_tree
from config import err_console, setup_logging
from coordinator import DEPLOY_PATH, Coordinator
from protocol import DecodeError, DeployReply, DeployRequest, PodStatus, ReplyCode, decode_reply, encode_reply, encode_request
from results import (
    REPLY_FILE,
    ContainerExtraction,
    Deletion,
    InventoryMismatch,
    RunManifest,
    build_manifest,
    load_manifest,
    write_manifest,
    write_report,
)
from run_config import ConfigError, LauncherConfig, TestRunConfig, config_digest, parse_config

logger = logging.getLogger(__name__)

CONNECT_TIMEOUT = 10
DEFAULT_TIMEOUT_GRACE = 600


class ExitCode(IntEnum):
    PASSED = 0
    TESTS_FAILED = 1
    CONFIG_ERROR = 2
    COORDINATOR_ERROR = 3
    ARTIFACT_ERROR = 4


class CoordinatorUnavailable(Exception):
    """The coordinator could not be reached or answered with garbage."""


class ExtractionError(Exception):
    """Result files of one container could not be copied out."""


@dataclass(frozen=True)
class LaunchOutcome:
    exit_code: int
    manifest_path: Path
    reply_path: Optional[Path]


class DeployClient(Protocol):
    def deploy(self, req: DeployRequest) -> tuple[DeployReply, bytes]:
        ...


class CoordinatorClient:
    """HTTP client for the coordinator's DeployTestRunner endpoint."""

    def __init__(self, base_url: str, verify: str | bool = True, read_timeout: float = DEFAULT_TIMEOUT_GRACE):
        self.base_url = base_url.rstrip("/")
        self.verify = verify
        self.read_timeout = read_timeout

    @classmethod
    def for_config(
        cls,
        launcher: LauncherConfig,
        run: TestRunConfig,
        url_override: Optional[str] = None,
        insecure: bool = False,
        timeout_grace: float = DEFAULT_TIMEOUT_GRACE,
    ) -> "CoordinatorClient":
        if url_override:
            base_url = url_override
        else:
            scheme = "https" if launcher.cert_file or launcher.coordinator_port == 443 else "http"
            host = launcher.coordinator_host
            if ":" in host and not host.startswith("["):
                host = f"[{host}]"
            base_url = f"{scheme}://{host}:{launcher.coordinator_port}"
        if insecure:
            verify: str | bool = False
        elif launcher.cert_file:
            verify = launcher.cert_file
        else:
            verify = True
        return cls(base_url, verify=verify, read_timeout=run.max_timeout + timeout_grace)

    def deploy(self, req: DeployRequest) -> tuple[DeployReply, bytes]:
        if isinstance(self.verify, str) and not Path(self.verify).is_file():
            raise CoordinatorUnavailable(f"certificate file {self.verify} not found")
        url = f"{self.base_url}{DEPLOY_PATH}"
        logger.info(f"Sending run {req.run_id} to {url}")
        try:
            response = requests.post(
                url,
                data=encode_request(req),
                headers={"Content-Type": "application/json"},
                verify=self.verify,
                timeout=(CONNECT_TIMEOUT, self.read_timeout),
            )
        except requests.RequestException as e:
            raise CoordinatorUnavailable(f"cannot reach coordinator at {url}: {e}") from e
        if response.status_code != 200:
            raise CoordinatorUnavailable(f"coordinator answered HTTP {response.status_code}: {response.text[:500]}")
        try:
            return decode_reply(response.content), response.content
        except DecodeError as e:
            raise CoordinatorUnavailable(f"unreadable coordinator reply: {e}") from e


class LocalCoordinatorClient:
    """Calls an in-process Coordinator; used for dry runs against a fake cluster."""

    def __init__(self, coordinator: Coordinator):
        self.coordinator = coordinator

    def deploy(self, req: DeployRequest) -> tuple[DeployReply, bytes]:
        reply = self.coordinator.deploy(req)
        return reply, encode_reply(reply)


def _container_dir(output_dir: Path, namespace: str, pod_name: str, container_name: str) -> Path:
    return output_dir / namespace / pod_name / container_name


def _read_results(backend: ClusterBackend, namespace: str, pod_name: str, sidecar: str, container: str) -> dict[str, bytes]:
    try:
        archive = backend.read_container_file(namespace, pod_name, sidecar, sidecar_path(container))
    except ClusterError as e:
        raise ExtractionError(str(e)) from e
    try:
        return unpack_tree(archive)
    except (tarfile.TarError, ValueError) as e:
        raise ExtractionError(f"bad archive from sidecar: {e}") from e


def _extract_one(backend: ClusterBackend, output_dir: Path, namespace: str, pod_name: str, sidecar: str, container: str) -> ContainerExtraction:
    extraction = ContainerExtraction(namespace, pod_name, container)
    target = _container_dir(output_dir, namespace, pod_name, container)
    if target.exists():
        shutil.rmtree(target)
    target.mkdir(parents=True)
    try:
        files = _read_results(backend, namespace, pod_name, sidecar, container)
    except ExtractionError as e:
        logger.warning(f"Extraction failed for {namespace}/{pod_name}/{container}: {e}")
        extraction.error = str(e)
        return extraction

    for relative, data in sorted(files.items()):
        destination = target / relative
        destination.parent.mkdir(parents=True, exist_ok=True)
        destination.write_bytes(data)
        extraction.files.append(destination.relative_to(output_dir).as_posix())
    if not files:
        extraction.note = "no result files"
    logger.info(f"Extracted {len(files)} file(s) for {namespace}/{pod_name}/{container}")
    return extraction


def extract_results(reply: DeployReply, backend: ClusterBackend, output_dir: Path) -> dict[tuple[str, str, str], ContainerExtraction]:
    """Copy every container's result directory out of its pod's sidecar.

    One container failing never stops the others; failures are recorded on
    the returned entries.
    """
    inventory: dict[tuple[str, str, str], ContainerExtraction] = {}
    jobs = []
    for pod in reply.pods:
        for container in pod.containers:
            if pod.status == PodStatus.ERROR:
                skipped = ContainerExtraction(pod.namespace, pod.pod_name, container.container_name)
                skipped.note = f"pod ended in ERROR ({pod.message}); nothing extracted"
                inventory[skipped.key] = skipped
                continue
            jobs.append((pod.namespace, pod.pod_name, pod.sidecar_name, container.container_name))
    if jobs:
        with ThreadPoolExecutor(max_workers=min(8, len(jobs)), thread_name_prefix="extract") as pool:
            for extraction in pool.map(lambda job: _extract_one(backend, output_dir, *job), jobs):
                inventory[extraction.key] = extraction
    return inventory


def cleanup(reply: Optional[DeployReply], backend: ClusterBackend) -> list[Deletion]:
    """Delete every pod named in the reply; failures are reported, not raised."""
    deletions = []
    for pod in reply.pods if reply is not None else []:
        try:
            backend.delete_pod(pod.namespace, pod.pod_name)
            deletions.append(Deletion(pod.namespace, pod.pod_name, ok=True))
        except ClusterError as e:
            logger.error(f"Could not delete pod {pod.namespace}/{pod.pod_name}: {e}")
            deletions.append(Deletion(pod.namespace, pod.pod_name, ok=False, detail=str(e)))
    return deletions


def exit_code_for(reply: DeployReply, inventory: dict, deletions: list[Deletion]) -> ExitCode:
    """A red test stays red: failures outrank artifact and cleanup problems."""
    if not reply.all_passed:
        return ExitCode.TESTS_FAILED
    if any(e.error for e in inventory.values()) or not all(d.ok for d in deletions):
        return ExitCode.ARTIFACT_ERROR
    return ExitCode.PASSED


def _finish(manifest: RunManifest, output_dir: Path, reply_path: Optional[Path]) -> LaunchOutcome:
    manifest_path = write_manifest(manifest, output_dir)
    write_report(manifest, output_dir)
    return LaunchOutcome(exit_code=manifest.exit_code, manifest_path=manifest_path, reply_path=reply_path)


def run_launcher(
    config_path: Path,
    output_dir: Path,
    backend: ClusterBackend,
    client: Optional[DeployClient] = None,
    coordinator_url: Optional[str] = None,
    insecure: bool = False,
    timeout_grace: float = DEFAULT_TIMEOUT_GRACE,
    run_id: Optional[str] = None,
) -> LaunchOutcome:
    """Run the whole launcher workflow and report the outcome."""
    output_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_id or str(uuid.uuid4())

    def failed(code: ExitCode, digest: str, error: str, reply: Optional[DeployReply] = None, reply_path=None) -> LaunchOutcome:
        err_console.print(f"[red]{error}[/red]")
        manifest = build_manifest(reply, {}, [], run_id, digest, output_dir, error=error, exit_code=int(code))
        return _finish(manifest, output_dir, reply_path)

    try:
        document = config_path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        return failed(ExitCode.CONFIG_ERROR, "", f"cannot read config {config_path}: {e}")
    try:
        launcher_config, run = parse_config(document)
    except ConfigError as e:
        raw_digest = hashlib.sha256(document.encode("utf-8")).hexdigest()
        return failed(ExitCode.CONFIG_ERROR, raw_digest, f"invalid config {config_path}: {e}")
    digest = config_digest(launcher_config, run)
    logger.info(f"Parsed config with {len(run.pods)} test runner pod(s), run id {run_id}")

    if client is None:
        client = CoordinatorClient.for_config(launcher_config, run, coordinator_url, insecure, timeout_grace)
    try:
        reply, raw_reply = client.deploy(DeployRequest(run_id=run_id, run=run))
    except CoordinatorUnavailable as e:
        return failed(ExitCode.COORDINATOR_ERROR, digest, str(e))

    reply_path = output_dir / REPLY_FILE
    reply_path.write_bytes(raw_reply)
    logger.info(f"Coordinator reply:\n{raw_reply.decode('utf-8', 'replace')}")

    if reply.code != ReplyCode.OK:
        return failed(ExitCode.COORDINATOR_ERROR, digest, f"coordinator refused the run: {reply.code.value}: {reply.detail}", reply, reply_path)

    # Everything extractable is on disk before the first delete.
    inventory = extract_results(reply, backend, output_dir)
    deletions = cleanup(reply, backend)
    code = exit_code_for(reply, inventory, deletions)
    try:
        manifest = build_manifest(reply, inventory, deletions, run_id, digest, output_dir, exit_code=int(code))
    except InventoryMismatch as e:
        return failed(ExitCode.ARTIFACT_ERROR, digest, f"result inventory is inconsistent: {e}", reply, reply_path)
    return _finish(manifest, output_dir, reply_path)


def print_verdicts(manifest: RunManifest) -> None:
    table = Table(title=f"bunk8s run {manifest.run_id}")
    table.add_column("Pod", style="cyan")
    table.add_column("Container", style="cyan")
    table.add_column("Verdict")
    table.add_column("Exit", justify="right")
    table.add_column("Files", justify="right")
    colours = {"PASSED": "green", "FAILED": "red", "NOT_RUN": "yellow"}
    for pod in manifest.pods:
        for container in pod.containers:
            colour = colours[container.verdict.value]
            table.add_row(
                f"{pod.namespace}/{pod.pod_name}",
                container.name,
                f"[{colour}]{container.verdict.value}[/{colour}]",
                "-" if container.exit_code is None else str(container.exit_code),
                str(len(container.files)),
            )
    err_console.print(table)


EXIT_CODE_HELP = """\b
Exit codes:
  0  every test container passed and results were stored and cleaned up
  1  a test failed or timed out
  2  the configuration is invalid or no Kubernetes credentials were found
  3  the coordinator could not be reached or refused the run
  4  tests passed but extraction or cleanup failed
"""


@click.command(name="bunk8s-launcher", epilog=EXIT_CODE_HELP)
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Run configuration YAML")
@click.option("--output", "output_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Directory for reply.json, manifest.json and results")
@click.option("--coordinator-url", default=None, help="Override the coordinator URL from the config")
@click.option("--insecure-skip-verify", is_flag=True, help="Do not verify the coordinator's TLS certificate")
@click.option("--timeout-grace", default=DEFAULT_TIMEOUT_GRACE, type=click.IntRange(min=0), show_default=True, help="Seconds to wait for the reply beyond the longest test timeout")
@click.option(
    "--fake-scenario",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Rehearse the run against an in-process coordinator and fake cluster",
)
@click.pass_context
def main(ctx, config_path: Path, output_dir: Path, coordinator_url: Optional[str], insecure_skip_verify: bool, timeout_grace: int, fake_scenario: Optional[Path]):
    """Run integration tests in Kubernetes through the bunk8s coordinator.

    Results land under OUTPUT/<namespace>/<pod>/<container>/. Only the
    manifest path is printed on standard output.

    Examples:
        python launcher.py --config bunk8s.yaml --output results/
        python launcher.py --config bunk8s.yaml --output results/ --fake-scenario scenario.json
    """
    setup_logging()
    client: Optional[DeployClient] = None
    if fake_scenario is not None:
        from fake_cluster import FakeCluster

        backend: ClusterBackend = FakeCluster.from_file(fake_scenario)
        client = LocalCoordinatorClient(Coordinator(backend))
        err_console.print(f"[yellow]Dry run against fake cluster {fake_scenario}[/yellow]")
    else:
        from kube_cluster import KubeCluster

        try:
            backend = KubeCluster()
        except ClusterError as e:
            err_console.print(f"[red]Cannot reach Kubernetes: {e}[/red]")
            ctx.exit(ExitCode.CONFIG_ERROR)

    outcome = run_launcher(
        config_path,
        output_dir,
        backend,
        client=client,
        coordinator_url=coordinator_url,
        insecure=insecure_skip_verify,
        timeout_grace=timeout_grace,
    )
    print_verdicts(load_manifest(output_dir))
    click.echo(str(outcome.manifest_path))
    ctx.exit(outcome.exit_code)


if __name__ == "__main__":
    main()
