"""
롤아웃 서비스 테스트 (프로세스 내 / 소켓)
"""
import io
import socket
import threading
import time

import pytest
import torch

from core.exceptions import BackpressureError, CheckpointFormatError, ServiceError, WeightShapeError
from core.checkpoint import params_to_bytes, save_checkpoint
from core.decoder import generate, replay_logprobs
from core.bdlm_model import init_params
from core.rollout_server import (
    ERROR, RolloutServer, ServiceConfig, WeightLease, encode_message, read_message, serve,
)
from core.tasks import Vocab
from rollout_services import LocalRolloutService, RolloutServiceFactory, SocketRolloutService
from conftest import make_config

PROMPTS = [[Vocab.BOS] + Vocab.encode(text) for text in ("1+2=", "33+4=", "9+9=")]


def _perturbed(params, scale=0.5, seed=1):
    g = torch.Generator().manual_seed(seed)
    changed = params.clone()
    for tensor in changed.tensors.values():
        tensor.add_(torch.randn(tensor.shape, generator=g) * scale)
    return changed


@pytest.fixture
def server(tiny_params, greedy_policy):
    rollout = RolloutServer(tiny_params, ServiceConfig(max_pending=4), greedy_policy)
    yield rollout
    rollout.close()


@pytest.fixture
def socket_service(tiny_params, greedy_policy):
    handle = serve(ServiceConfig(transport="socket", port=0), tiny_params, greedy_policy)
    client = SocketRolloutService(*handle.address, timeout=30.0)
    yield handle, client
    client.close()
    handle.stop()


def test_server_owns_a_copy(server, tiny_params):
    tiny_params.tensors["head.bias"].fill_(3.0)
    assert float(server._params["head.bias"].abs().sum()) == 0.0
    assert server.version() == {"version": 1, "loads": 1}


def test_generate_batch_matches_direct_generation(server, tiny_params, greedy_policy):
    result = server.generate_batch(PROMPTS)
    assert len(result.trajectories) == 3
    assert result.errors == [None, None, None]
    assert result.versions == [1, 1, 1]
    for i, (prompt, traj) in enumerate(zip(PROMPTS, result.trajectories)):
        direct = generate(tiny_params, prompt, greedy_policy.replace(seed=greedy_policy.seed + i))
        assert traj.output == direct.output


def test_generate_batch_reports_item_errors(server):
    result = server.generate_batch([PROMPTS[0], [1] * 500])
    assert result.trajectories[0] is not None
    assert result.trajectories[1] is None
    assert result.errors[1]


def test_parallel_workers_keep_order(tiny_params, sampling_policy):
    serial = RolloutServer(tiny_params, ServiceConfig(workers=1), sampling_policy)
    parallel = RolloutServer(tiny_params, ServiceConfig(workers=3), sampling_policy)
    a = serial.generate_batch(PROMPTS * 2)
    b = parallel.generate_batch(PROMPTS * 2)
    assert [t.output for t in a.trajectories] == [t.output for t in b.trajectories]


def test_update_weights_in_place_changes_outputs(server, tiny_params):
    before = server.generate_batch(PROMPTS[:1]).trajectories[0]
    served = server._params["tok_emb"]
    new = _perturbed(tiny_params)
    assert server.update_weights(new) == 2
    # 같은 텐서 객체에 제자리 복사
    assert server._params["tok_emb"] is served
    assert torch.equal(served, new["tok_emb"])
    after = server.generate_batch(PROMPTS[:1]).trajectories[0]
    assert after.version == 2
    expected = generate(new, PROMPTS[0], server.default_policy)
    assert after.output == expected.output
    assert before.version == 1
    assert server.version() == {"version": 2, "loads": 1}


def test_update_weights_from_blob(server, tiny_params):
    new = _perturbed(tiny_params, seed=3)
    assert server.update_weights(params_to_bytes(new)) == 2
    assert torch.equal(server._params["head.weight"], new["head.weight"])


def test_update_weights_rejects_shape_mismatch(server):
    other = init_params(make_config(d_model=8))
    with pytest.raises(WeightShapeError):
        server.update_weights(other)
    with pytest.raises(CheckpointFormatError):
        server.update_weights(b"garbage")
    assert server.version()["version"] == 1
    assert server.stats()["requests"]["rejected"] == 2


def test_update_weights_rejects_blob_with_invalid_config(server, tiny_params):
    blob = params_to_bytes(tiny_params)
    assert b'"n_heads": 2' in blob
    corrupt = blob.replace(b'"n_heads": 2', b'"n_heads": 3', 1)
    with pytest.raises(CheckpointFormatError):
        server.update_weights(corrupt)
    assert server.version()["version"] == 1
    assert server.stats()["requests"]["rejected"] == 1


def test_update_weights_rejects_different_serving_config(server, tiny_params):
    other = init_params(make_config(eos_token_id=13))
    with pytest.raises(WeightShapeError):
        server.update_weights(other)


def test_weight_lease_writer_waits_for_readers_and_blocks_new_readers():
    lease = WeightLease()
    events = []
    reader_in = threading.Event()
    release_reader = threading.Event()

    def reader():
        with lease.read():
            reader_in.set()
            release_reader.wait(5)
            events.append("reader done")

    def writer():
        with lease.write():
            events.append("write")

    def late_reader():
        with lease.read():
            events.append("late reader")

    threads = [threading.Thread(target=reader)]
    threads[0].start()
    reader_in.wait(5)
    threads.append(threading.Thread(target=writer))
    threads[1].start()
    time.sleep(0.05)
    threads.append(threading.Thread(target=late_reader))
    threads[2].start()
    time.sleep(0.05)
    assert events == []
    release_reader.set()
    for t in threads:
        t.join(5)
    assert events == ["reader done", "write", "late reader"]


def test_read_lease_timeout_is_reported_per_item(tiny_params, greedy_policy):
    rollout = RolloutServer(tiny_params, ServiceConfig(lease_timeout=0.05), greedy_policy)
    with rollout._lease.write():
        result = rollout.generate_batch(PROMPTS[:2])
    assert result.trajectories == [None, None]
    assert all(error and "임대" in error for error in result.errors)
    # 임대가 풀리면 다시 정상 생성
    assert rollout.generate_batch(PROMPTS[:1]).errors == [None]


def test_weight_lease_timeout():
    lease = WeightLease()
    with lease.read():
        with pytest.raises(ServiceError):
            with lease.write(timeout=0.05):
                pass


def test_backpressure_when_queue_full(tiny_params, greedy_policy):
    rollout = RolloutServer(tiny_params, ServiceConfig(max_pending=1), greedy_policy)
    started = threading.Event()
    results = []

    with rollout._lease.write():
        def blocked():
            started.set()
            results.append(rollout.generate_batch(PROMPTS[:1]))
        thread = threading.Thread(target=blocked)
        thread.start()
        started.wait(5)
        time.sleep(0.05)
        with pytest.raises(BackpressureError):
            rollout.generate_batch(PROMPTS[:1])
    thread.join(5)
    assert results[0].trajectories[0] is not None
    assert rollout.stats()["requests"]["GENERATE"] == 1


@pytest.mark.slow
def test_concurrent_generation_and_updates_use_single_versions(tiny_params, sampling_policy):
    rollout = RolloutServer(tiny_params, ServiceConfig(max_pending=8), sampling_policy)
    snapshots = {1: tiny_params}
    trajectories = []
    errors = []
    lock = threading.Lock()

    def worker(index):
        # 워커당 250개 요청, 10번째마다 가중치 교체 (총 생성 900, 교체 100)
        try:
            for n in range(250):
                if n % 10 == 9:
                    update = _perturbed(tiny_params, scale=0.1, seed=1000 * index + n)
                    version = rollout.update_weights(update)
                    with lock:
                        snapshots[version] = update
                else:
                    result = rollout.generate_batch([PROMPTS[n % 3]], sampling_policy.replace(seed=n))
                    with lock:
                        trajectories.extend(result.trajectories)
                        errors.extend(e for e in result.errors if e is not None)
        except Exception as e:  # noqa: BLE001
            with lock:
                errors.append(e)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(600)

    assert not errors
    assert len(trajectories) == 900
    assert rollout.version() == {"version": 101, "loads": 1}
    assert sorted(snapshots) == list(range(1, 102))
    assert len({t.version for t in trajectories}) > 1
    assert sum(rollout.stats()["generations_per_version"].values()) == 900

    mixed = 0
    for trajectory in trajectories:
        replayed = replay_logprobs(snapshots[trajectory.version], trajectory)
        if not torch.allclose(replayed.double(), trajectory.behavior_logprobs(), atol=1e-4):
            mixed += 1
    assert mixed == 0


def test_closed_server_rejects_requests(tiny_params):
    rollout = RolloutServer(tiny_params)
    rollout.close()
    with pytest.raises(ServiceError):
        rollout.generate_batch(PROMPTS[:1])


def test_from_checkpoint(tmp_path, tiny_params):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(tiny_params, path)
    rollout = RolloutServer.from_checkpoint(path)
    assert torch.equal(rollout._params["tok_emb"], tiny_params["tok_emb"])


def test_message_framing():
    stream = io.BytesIO(encode_message("VERSION", {}) + encode_message("GENERATE", {"prompts": [[1]]}))
    assert read_message(stream)["kind"] == "VERSION"
    assert read_message(stream)["body"] == {"prompts": [[1]]}
    assert read_message(stream) is None
    with pytest.raises(ServiceError):
        read_message(io.BytesIO(encode_message("VERSION", {})[:-2]))


def test_socket_service_round_trip(socket_service, tiny_params, greedy_policy):
    handle, client = socket_service
    assert client.is_available()
    result = client.generate_batch(PROMPTS, greedy_policy)
    local = handle.rollout.generate_batch(PROMPTS, greedy_policy)
    assert [t.output for t in result.trajectories] == [t.output for t in local.trajectories]
    assert [t.steps for t in result.trajectories] == [t.steps for t in local.trajectories]

    new = _perturbed(tiny_params)
    assert client.update_weights(new) == 2
    assert client.version() == {"version": 2, "loads": 1}
    assert client.generate_batch(PROMPTS[:1]).versions == [2]


def test_socket_service_maps_errors(socket_service):
    _, client = socket_service
    with pytest.raises(WeightShapeError):
        client.update_weights(init_params(make_config(d_model=8)))
    assert client.version()["version"] == 1


def test_socket_unknown_kind_keeps_connection_open(socket_service):
    handle, _ = socket_service
    with socket.create_connection(handle.address, timeout=10) as sock:
        stream = sock.makefile("rwb")
        stream.write(encode_message("BOGUS", {}))
        stream.flush()
        reply = read_message(stream)
        assert reply["kind"] == ERROR
        stream.write(encode_message("VERSION", {}))
        stream.flush()
        assert read_message(stream)["kind"] == "VERSION_REPLY"


def test_socket_client_reconnects_after_drop(socket_service):
    _, client = socket_service
    client.version()
    client._sock.shutdown(socket.SHUT_RDWR)
    assert client.version()["version"] == 1


class _ReplyDroppingServer:
    """요청 하나를 읽어 기록한 뒤 응답 없이 연결을 닫는 서버"""

    def __init__(self):
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen()
        self.address = self.sock.getsockname()
        self.received = []
        threading.Thread(target=self._run, daemon=True).start()

    def _run(self):
        while True:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            with conn, conn.makefile("rb") as stream:
                message = read_message(stream)
                if message is not None:
                    self.received.append(message["kind"])

    def close(self):
        self.sock.close()


@pytest.fixture
def dropping_server():
    server = _ReplyDroppingServer()
    yield server
    server.close()


def test_socket_update_is_not_resent_after_lost_reply(dropping_server, tiny_params):
    client = SocketRolloutService(*dropping_server.address, timeout=5.0)
    with pytest.raises(ServiceError):
        client.update_weights(tiny_params)
    client.close()
    assert dropping_server.received == ["UPDATE_WEIGHTS"]


def test_socket_version_is_resent_after_lost_reply(dropping_server):
    client = SocketRolloutService(*dropping_server.address, timeout=5.0)
    with pytest.raises(ServiceError):
        client.version()
    client.close()
    assert dropping_server.received == ["VERSION", "VERSION"]


def test_socket_client_unreachable():
    holder = socket.socket()
    holder.bind(("127.0.0.1", 0))
    port = holder.getsockname()[1]
    holder.close()
    client = SocketRolloutService("127.0.0.1", port, timeout=1.0)
    assert not client.is_available()
    with pytest.raises(ServiceError):
        client.version()


def test_serve_rejects_port_in_use(tiny_params):
    handle = serve(ServiceConfig(port=0), tiny_params)
    try:
        with pytest.raises(ServiceError):
            serve(ServiceConfig(port=handle.address[1]), tiny_params)
    finally:
        handle.stop()


def test_serve_requires_model():
    with pytest.raises(ServiceError):
        serve(ServiceConfig(port=0))


def test_socket_shutdown(tiny_params):
    handle = serve(ServiceConfig(port=0), tiny_params)
    client = SocketRolloutService(*handle.address, timeout=10.0)
    assert client.shutdown()["version"] == 1
    handle.wait(5)
    handle.stop()


def test_factory_caches_and_validates(tiny_params):
    factory = RolloutServiceFactory(ServiceConfig())
    assert factory.get_service("local") is None
    service = factory.get_service("local", params=tiny_params)
    assert isinstance(service, LocalRolloutService)
    assert factory.get_service("local") is service
    assert factory.get_service("grpc") is None
    assert factory.list_available_services() == ["local"]
    factory.close_all()
    assert not service.is_available()


def test_factory_socket_service(socket_service):
    handle, _ = socket_service
    factory = RolloutServiceFactory(ServiceConfig(transport="socket", host=handle.address[0],
                                                  port=handle.address[1]))
    service = factory.get_service()
    assert isinstance(service, SocketRolloutService)
    assert service.version()["version"] == 1
    factory.close_all()
