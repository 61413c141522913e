import pytest
from kubernetes import client
from kubernetes.config import ConfigException

import kube_cluster
from cluster import RUN_ID_LABEL, RUNNING, SIDECAR_NAME, ClusterError, ErrorKind, PodPhase, terminated, unpack_tree
from coordinator import Coordinator, build_blueprint
from fake_cluster import FakeCluster, scenario_for
from kube_cluster import KubeCluster
from launcher import ExitCode, LocalCoordinatorClient, run_launcher
from results import REPLY_FILE
from tests.conftest import make_run
from tests.kube_api import pod_object


class StepClock:
    def __init__(self, *values):
        self.values = list(values)

    def __call__(self):
        return self.values.pop(0) if len(self.values) > 1 else self.values[0]


def backend(kube_api, **kwargs) -> KubeCluster:
    return KubeCluster(api=kube_api.core_api(), exec_stream=kube_api.exec_stream, **kwargs)


def seed(kube_api, run, exit_codes=None):
    """Give the API double the namespaces, exit codes and result files of a run."""
    exit_codes = exit_codes or {}
    for pod in run.pods:
        kube_api.namespaces.add(pod.namespace)
        for c in pod.containers:
            key = (pod.namespace, pod.pod_name, c.container_name)
            code = exit_codes.get(key, 0)
            kube_api.exit_codes[key] = code
            files = kube_api.files.setdefault((pod.namespace, pod.pod_name), {})
            files[f"/results/{c.container_name}/results.log"] = f"{c.container_name}: exit {code}\n".encode()


def test_existence_checks_use_get(kube_api):
    kube_api.namespaces.add("bunk8s-fe")
    kube = backend(kube_api)

    assert kube.namespace_exists("bunk8s-fe")
    assert not kube.namespace_exists("bunk8s-be")
    assert not kube.pod_exists("bunk8s-fe", "test-runner-pod")
    assert kube_api.routes() == [
        ("GET", "/api/v1/namespaces/bunk8s-fe"),
        ("GET", "/api/v1/namespaces/bunk8s-be"),
        ("GET", "/api/v1/namespaces/bunk8s-fe/pods/test-runner-pod"),
    ]


def test_create_posts_pod_manifest(kube_api, listing_config):
    _, run = listing_config
    kube_api.namespaces.add("bunk8s-fe")
    kube = backend(kube_api)

    kube.create_pod(build_blueprint(run.pods[0], "run-7"))

    request = kube_api.requests[0]
    body = request.body
    assert request.route == ("POST", "/api/v1/namespaces/bunk8s-fe/pods")
    assert body["metadata"]["name"] == "test-runner-pod"
    assert body["metadata"]["labels"][RUN_ID_LABEL] == "run-7"
    assert body["spec"]["restartPolicy"] == "Never"
    assert body["spec"]["volumes"] == [{"name": "bunk8s-results", "emptyDir": {}}]
    tests, sidecar = body["spec"]["containers"]
    assert tests["command"] == ["go", "test"]
    assert tests["args"] == ["-v", "./..."]
    assert tests["volumeMounts"] == [{"name": "bunk8s-results", "mountPath": "/results", "subPath": "integration-tests"}]
    assert sidecar["name"] == SIDECAR_NAME
    assert sidecar["volumeMounts"] == [
        {"name": "bunk8s-results", "mountPath": "/results/integration-tests", "subPath": "integration-tests"}
    ]
    assert kube.pod_exists("bunk8s-fe", "test-runner-pod")


def test_create_existing_pod_conflicts(kube_api):
    kube_api.namespaces.add("ns")
    kube = backend(kube_api)
    blueprint = build_blueprint(make_run(("ns", "p", ["c"])).pods[0], "r")
    kube.create_pod(blueprint)

    with pytest.raises(ClusterError) as excinfo:
        kube.create_pod(blueprint)

    assert excinfo.value.kind == ErrorKind.CONFLICT
    assert "already exists" in excinfo.value.detail


@pytest.mark.parametrize(
    "status,kind",
    [(401, ErrorKind.FORBIDDEN), (403, ErrorKind.FORBIDDEN), (404, ErrorKind.NOT_FOUND), (409, ErrorKind.CONFLICT), (504, ErrorKind.TIMEOUT), (500, ErrorKind.PROTOCOL)],
)
def test_create_maps_status_codes(kube_api, status, kind):
    kube_api.failures[("POST", "/api/v1/namespaces/ns/pods")] = (status, "nope")
    kube = backend(kube_api)

    with pytest.raises(ClusterError) as excinfo:
        kube.create_pod(build_blueprint(make_run(("ns", "p", ["c"])).pods[0], "r"))

    assert excinfo.value.kind == kind
    assert "nope" in excinfo.value.detail


@pytest.mark.parametrize(
    "method,call",
    [
        ("DELETE", lambda kube: kube.delete_pod("ns", "p")),
        ("GET", lambda kube: kube.pod_exists("ns", "p")),
    ],
)
def test_conflict_status_outside_create_is_protocol(kube_api, method, call):
    kube_api.failures[(method, "/api/v1/namespaces/ns/pods/p")] = (409, "operation in progress")

    with pytest.raises(ClusterError) as excinfo:
        call(backend(kube_api))

    assert excinfo.value.kind == ErrorKind.PROTOCOL


def test_unreachable_api_is_transport():
    configuration = client.Configuration()
    configuration.host = "http://127.0.0.1:9"
    configuration.retries = False
    kube = KubeCluster(api=client.CoreV1Api(client.ApiClient(configuration)))

    with pytest.raises(ClusterError) as excinfo:
        kube.namespace_exists("ns")

    assert excinfo.value.kind == ErrorKind.TRANSPORT


def test_delete_tolerates_missing_pod(kube_api):
    kube = backend(kube_api)

    kube.delete_pod("ns", "p")

    request = kube_api.requests[0]
    assert request.route == ("DELETE", "/api/v1/namespaces/ns/pods/p")
    assert request.body["propagationPolicy"] == "Background"


def test_missing_credentials(monkeypatch):
    def refuse(*args, **kwargs):
        raise ConfigException("nothing to load")

    monkeypatch.setattr(kube_cluster, "load_incluster_config", refuse)
    monkeypatch.setattr(kube_cluster, "load_kube_config", refuse)

    with pytest.raises(ClusterError) as excinfo:
        KubeCluster()

    assert excinfo.value.kind == ErrorKind.FORBIDDEN
    assert excinfo.value.resource == "kubeconfig"


def test_watch_translates_events(kube_api):
    kube_api.watch_frames[("ns", "p")] = [
        {"type": "ADDED", "object": pod_object("ns", "p", {"it": "waiting", SIDECAR_NAME: "waiting"}, "Pending", 1)},
        {"type": "BOOKMARK", "object": {"kind": "Pod", "apiVersion": "v1", "metadata": {"resourceVersion": "2"}}},
        {"type": "MODIFIED", "object": pod_object("ns", "p", {"it": 1, SIDECAR_NAME: "running"}, "Running", 3)},
    ]
    kube = backend(kube_api, clock=StepClock(0.0, 0.5, 1.5, 120.0))

    events = list(kube.watch_pod("ns", "p", 60))

    request = kube_api.requests[0]
    assert request.route == ("GET", "/api/v1/namespaces/ns/pods")
    assert request.query["watch"].lower() == "true"
    assert request.query["fieldSelector"] == "metadata.name=p"
    assert request.query["timeoutSeconds"] == "60"
    assert [e.pod_phase for e in events] == [PodPhase.PENDING, PodPhase.RUNNING]
    assert events[1].container_states == {"it": terminated(1), SIDECAR_NAME: RUNNING}
    assert [e.timestamp for e in events] == [0.5, 1.5]


def test_watch_closing_early_is_transport(kube_api):
    kube_api.watch_frames[("ns", "p")] = [
        {"type": "ADDED", "object": pod_object("ns", "p", {"it": "running"})},
    ]

    with pytest.raises(ClusterError) as excinfo:
        list(backend(kube_api).watch_pod("ns", "p", 60))

    assert excinfo.value.kind == ErrorKind.TRANSPORT


def test_watch_reset_is_transport(kube_api):
    kube_api.watch_frames[("ns", "p")] = [
        {"type": "ADDED", "object": pod_object("ns", "p", {"it": "running"})},
    ]
    kube_api.broken_watches.add(("ns", "p"))

    with pytest.raises(ClusterError) as excinfo:
        list(backend(kube_api).watch_pod("ns", "p", 60))

    assert excinfo.value.kind == ErrorKind.TRANSPORT


def test_watch_deleted_is_not_found(kube_api):
    kube_api.watch_frames[("ns", "p")] = [
        {"type": "DELETED", "object": pod_object("ns", "p", {"it": "running"})},
    ]

    with pytest.raises(ClusterError) as excinfo:
        list(backend(kube_api).watch_pod("ns", "p", 60))

    assert excinfo.value.kind == ErrorKind.NOT_FOUND


def test_watch_gone_is_transport(kube_api):
    kube_api.watch_frames[("ns", "p")] = [
        {"type": "ERROR", "object": {"kind": "Status", "code": 410, "reason": "Expired", "message": "too old resource version"}},
    ]

    with pytest.raises(ClusterError) as excinfo:
        list(backend(kube_api).watch_pod("ns", "p", 60))

    assert excinfo.value.kind == ErrorKind.TRANSPORT


def test_watch_forbidden(kube_api):
    kube_api.failures[("GET", "/api/v1/namespaces/ns/pods")] = (403, "pods is forbidden")

    with pytest.raises(ClusterError) as excinfo:
        list(backend(kube_api).watch_pod("ns", "p", 60))

    assert excinfo.value.kind == ErrorKind.FORBIDDEN


@pytest.fixture
def sidecar_pod(kube_api):
    kube_api.namespaces.add("ns")
    kube_api.pods[("ns", "p")] = pod_object("ns", "p", {"it": 0, SIDECAR_NAME: "running"})
    return kube_api


def test_read_directory_strips_base_name(sidecar_pod):
    sidecar_pod.files[("ns", "p")] = {"/results/it/report.xml": b"<ok/>", "/results/it/logs/run.log": b"log"}

    data = backend(sidecar_pod).read_container_file("ns", "p", SIDECAR_NAME, "/results/it")

    assert unpack_tree(data) == {"report.xml": b"<ok/>", "logs/run.log": b"log"}
    request = sidecar_pod.requests[-1]
    assert request.route == ("GET", "/api/v1/namespaces/ns/pods/p/exec")
    assert request.query["container"] == SIDECAR_NAME
    assert request.query["command"] == ["tar", "cf", "-", "-C", "/results", "it"]
    assert request.query["binary"] is True
    assert request.query["stdin"] is False and request.query["tty"] is False
    assert request.query["_preload_content"] is False


def test_read_single_file_returns_bytes(sidecar_pod):
    payload = bytes(range(256)) * 300
    sidecar_pod.files[("ns", "p")] = {"/results/it/run.log": payload}

    assert backend(sidecar_pod).read_container_file("ns", "p", SIDECAR_NAME, "/results/it/run.log") == payload


def test_read_missing_path_is_not_found(sidecar_pod):
    with pytest.raises(ClusterError) as excinfo:
        backend(sidecar_pod).read_container_file("ns", "p", SIDECAR_NAME, "/results/it")

    assert excinfo.value.kind == ErrorKind.NOT_FOUND
    assert excinfo.value.resource == "/results/it"


def test_exec_handshake_forbidden(sidecar_pod):
    sidecar_pod.failures[("GET", "/api/v1/namespaces/ns/pods/p/exec")] = (403, "Forbidden")

    with pytest.raises(ClusterError) as excinfo:
        backend(sidecar_pod).read_container_file("ns", "p", SIDECAR_NAME, "/results/it")

    assert excinfo.value.kind == ErrorKind.FORBIDDEN


def test_unreadable_tar_is_protocol(sidecar_pod, monkeypatch):
    kube = backend(sidecar_pod)
    monkeypatch.setattr(kube, "_exec", lambda *args: (b"not a tar archive" * 40, b"", {"status": "Success"}))

    with pytest.raises(ClusterError) as excinfo:
        kube.read_container_file("ns", "p", SIDECAR_NAME, "/results/it")

    assert excinfo.value.kind == ErrorKind.PROTOCOL


def test_launcher_workflow_against_api_server(kube_api, write_config, tmp_path):
    run = make_run(("ns-a", "runner-a", ["it"]))
    seed(kube_api, run)
    kube = backend(kube_api)

    outcome = run_launcher(
        write_config(run), tmp_path / "out", kube, client=LocalCoordinatorClient(Coordinator(kube)), run_id="run-1"
    )

    assert outcome.exit_code == ExitCode.PASSED
    assert kube_api.routes() == [
        ("GET", "/api/v1/namespaces/ns-a"),
        ("GET", "/api/v1/namespaces/ns-a/pods/runner-a"),
        ("POST", "/api/v1/namespaces/ns-a/pods"),
        ("GET", "/api/v1/namespaces/ns-a/pods"),
        ("GET", "/api/v1/namespaces/ns-a/pods/runner-a/exec"),
        ("DELETE", "/api/v1/namespaces/ns-a/pods/runner-a"),
    ]
    assert kube_api.requests[3].query["fieldSelector"] == "metadata.name=runner-a"
    assert kube_api.requests[4].query["container"] == SIDECAR_NAME
    assert (tmp_path / "out" / "ns-a" / "runner-a" / "it" / "results.log").read_bytes() == b"it: exit 0\n"
    assert kube_api.pods == {}


@pytest.mark.parametrize(
    "exit_codes",
    [{}, {("ns-b", "runner-b", "api"): 1}],
    ids=["all-pass", "one-fail"],
)
def test_same_outcome_as_fake_cluster(kube_api, two_pod_run, write_config, tmp_path, exit_codes):
    seed(kube_api, two_pod_run, exit_codes)
    backends = {
        "fake": FakeCluster(scenario_for(two_pod_run, exit_codes=exit_codes)),
        "kube": backend(kube_api),
    }

    outcomes = {
        name: run_launcher(
            write_config(two_pod_run),
            tmp_path / name,
            cluster,
            client=LocalCoordinatorClient(Coordinator(cluster)),
            run_id="run-1",
        )
        for name, cluster in backends.items()
    }

    assert outcomes["fake"].exit_code == outcomes["kube"].exit_code
    assert (tmp_path / "fake" / REPLY_FILE).read_bytes() == (tmp_path / "kube" / REPLY_FILE).read_bytes()
    for ns, pod, container in [("ns-a", "runner-a", "it"), ("ns-b", "runner-b", "api"), ("ns-b", "runner-b", "ui")]:
        relative = f"{ns}/{pod}/{container}/results.log"
        assert (tmp_path / "fake" / relative).read_bytes() == (tmp_path / "kube" / relative).read_bytes()
    assert kube_api.pods == {}
