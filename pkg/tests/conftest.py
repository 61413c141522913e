import random
import string
from pathlib import Path

import pytest

from fake_cluster import FakeCluster, scenario_for
from run_config import LauncherConfig, TestContainerSpec, TestRunConfig, TestRunnerPodSpec, parse_config, render_config
from tests.kube_api import KubeApiDouble

FIXTURES = Path(__file__).parent / "fixtures"

# Strings YAML likes to reinterpret; they must survive a render/parse round trip.
TRICKY_WORDS = ["yes", "no", "null", "~", "0755", "1e3", "true", "a: b", "#hash", "- dash", "", " spaced ", "ünïcode"]


def random_label(rng: random.Random, max_length: int = 20) -> str:
    alphabet = string.ascii_lowercase + string.digits
    length = rng.randint(1, max_length)
    if length == 1:
        return rng.choice(alphabet)
    middle = "".join(rng.choice(alphabet + "-") for _ in range(length - 2))
    return rng.choice(alphabet) + middle + rng.choice(alphabet)


def random_words(rng: random.Random, upper: int) -> list[str]:
    words = []
    for _ in range(rng.randint(0, upper)):
        if rng.random() < 0.3:
            words.append(rng.choice(TRICKY_WORDS))
        else:
            words.append("".join(rng.choice(string.ascii_letters + "./-_=") for _ in range(rng.randint(1, 12))))
    return words


def random_container(rng: random.Random, name: str) -> TestContainerSpec:
    commands = random_words(rng, 3)
    args = random_words(rng, 4) if commands else []
    depth = rng.randint(1, 3)
    return TestContainerSpec(
        container_name=name,
        image=f"registry.example.com/{random_label(rng)}:{rng.randint(0, 99)}",
        startup_commands=commands,
        startup_command_args=args,
        test_result_path="/" + "/".join(random_label(rng, 8) for _ in range(depth)),
    )


def random_config(rng: random.Random) -> tuple[LauncherConfig, TestRunConfig]:
    launcher = LauncherConfig(
        coordinator_host=rng.choice(["10.0.0.7", "coordinator.example.com", "bunk8s.internal"]),
        coordinator_port=rng.randint(1, 65535),
        cert_file=rng.choice([None, "ca.pem", "/etc/bunk8s/ca.pem"]),
    )
    pods = []
    used = set()
    for _ in range(rng.randint(1, 4)):
        key = (random_label(rng), random_label(rng, 10))
        if key in used:
            continue
        used.add(key)
        names = list(dict.fromkeys(random_label(rng, 12) for _ in range(rng.randint(1, 3))))
        pods.append(
            TestRunnerPodSpec(
                pod_name=key[0],
                namespace=key[1],
                test_timeout=rng.randint(1, 7200),
                containers=[random_container(rng, name) for name in names],
            )
        )
    return launcher, TestRunConfig(pods=pods)


def make_run(*pods: tuple[str, str, list[str]], timeout: int = 60) -> TestRunConfig:
    """Build a run from (namespace, pod, [container, ...]) triples."""
    return TestRunConfig(
        pods=[
            TestRunnerPodSpec(
                pod_name=pod,
                namespace=namespace,
                test_timeout=timeout,
                containers=[
                    TestContainerSpec(container_name=c, image=f"example/{c}:1", test_result_path=f"/out/{c}")
                    for c in containers
                ],
            )
            for namespace, pod, containers in pods
        ]
    )


@pytest.fixture
def listing_document() -> str:
    return (FIXTURES / "run-config.yaml").read_text()


@pytest.fixture
def listing_config(listing_document):
    return parse_config(listing_document)


@pytest.fixture
def two_pod_run() -> TestRunConfig:
    return make_run(("ns-a", "runner-a", ["it"]), ("ns-b", "runner-b", ["api", "ui"]))


@pytest.fixture
def fake_for():
    """Factory: FakeCluster scripted for a run, with scenario_for keyword overrides."""

    def build(run: TestRunConfig, **kwargs) -> FakeCluster:
        return FakeCluster(scenario_for(run, **kwargs))

    return build


@pytest.fixture
def write_config(tmp_path):
    """Factory: write a run config document into tmp_path and return its path."""

    def write(run: TestRunConfig, launcher: LauncherConfig = None) -> Path:
        launcher = launcher or LauncherConfig(coordinator_host="127.0.0.1", coordinator_port=8080)
        path = tmp_path / "bunk8s.yaml"
        path.write_text(render_config(launcher, run))
        return path

    return write


@pytest.fixture
def kube_api():
    """Loopback core/v1 API double, running for the duration of one test."""
    double = KubeApiDouble().start()
    yield double
    double.stop()
