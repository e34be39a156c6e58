"""
블록 확산 언어 모델 후처리 학습 파이프라인 명령줄 진입점

명령:
    gen-data   덧셈 과제 데이터셋 생성
    sft        확산 SFT 학습
    rl         DiPO 강화학습 (롤아웃 서비스 사용)
    eval       τ 스윕 평가
    bench-mask 확장 순전파 vs 순차 순전파 비교
    bench-loop 저장/재로드 루프 vs 상주 서비스 루프 비교
    serve      소켓 롤아웃 서비스 실행
"""
import os
import sys
import argparse
import platform
import dataclasses
from typing import Dict, List, Optional, Tuple

import torch

from core import __version__
from core.exceptions import BdlmError, ConfigError
from core.bdlm_model import ModelParams, init_params, param_count
from core.checkpoint import load_checkpoint, save_checkpoint
from core.tasks import TaskSample, gen_dataset, load_dataset, save_dataset, split_dataset, task_layout
from core.tensor_ops import seed_everything
from core.diffusion_sft import sft_train
from core.dipo_trainer import rl_train, tau_sweep
from core.benchmark import bench_loop, bench_mask
from core.rollout_server import serve
from rollout_services import RolloutServiceFactory
from utils.common import get_timestamp_str, setup_logger, write_json
from utils.config import RunConfig, load_run_config

# 로거 설정
logger = setup_logger("bdlm")

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config", "config.yaml")


def _paths(out_dir: str) -> Dict[str, str]:
    return {
        "train": os.path.join(out_dir, "data", "train.jsonl"),
        "eval": os.path.join(out_dir, "data", "eval.jsonl"),
        "sft_ckpt": os.path.join(out_dir, "sft.ckpt"),
        "rl_ckpt": os.path.join(out_dir, "rl.ckpt"),
        "sft_metrics": os.path.join(out_dir, "sft_metrics.csv"),
        "rl_report": os.path.join(out_dir, "rl_report.csv"),
        "eval_csv": os.path.join(out_dir, "eval.csv"),
        "bench_mask": os.path.join(out_dir, "bench_mask.csv"),
        "bench_loop": os.path.join(out_dir, "bench_loop.csv"),
        "bench_update": os.path.join(out_dir, "bench_update.json"),
    }


def write_manifest(out_dir: str, command: str, config: RunConfig, seed: int, artifacts: Dict[str, str],
                   extra: Optional[Dict] = None) -> str:
    """
    실행 매니페스트 JSON 작성 (설정 해시, 시드, 버전, 산출물)
    """
    path = os.path.join(out_dir, f"manifest_{command}.json")
    manifest = {
        "command": command,
        "config_hash": config.hash,
        "seed": seed,
        "versions": {"python": platform.python_version(), "torch": torch.__version__, "package": __version__},
        "created_at": get_timestamp_str(),
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    write_json(path, manifest)
    logger.info(f"실행 매니페스트 저장: {path}")
    return path


def _datasets(config: RunConfig, paths: Dict[str, str]) -> Tuple[List[TaskSample], List[TaskSample]]:
    if os.path.exists(paths["train"]) and os.path.exists(paths["eval"]):
        return load_dataset(paths["train"]), load_dataset(paths["eval"])
    logger.info("데이터셋이 없어 새로 생성합니다.")
    return _generate_data(config, paths)


def _generate_data(config: RunConfig, paths: Dict[str, str]) -> Tuple[List[TaskSample], List[TaskSample]]:
    data = config.data
    samples = gen_dataset(data.seed, data.size, data.digits)
    train, held_out = split_dataset(samples, data.held_out, data.seed)
    save_dataset(train, paths["train"])
    save_dataset(held_out, paths["eval"])
    return train, held_out


def _layout(config: RunConfig):
    layout = task_layout(config.data.digits, config.model.block_size, config.data.output_blocks)
    layout.check_fits(config.model.max_seq_len)
    return layout


def _latest_checkpoint(paths: Dict[str, str], explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    for key in ("rl_ckpt", "sft_ckpt"):
        if os.path.exists(paths[key]):
            return paths[key]
    raise BdlmError("평가할 체크포인트가 없습니다. 먼저 sft 또는 rl 을 실행하세요.")


def cmd_gen_data(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    train, held_out = _generate_data(config, paths)
    write_manifest(out_dir, "gen-data", config, seed, {"train": paths["train"], "eval": paths["eval"]},
                   {"counts": {"train": len(train), "eval": len(held_out)}})
    return 0


def cmd_sft(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    train, held_out = _datasets(config, paths)
    layout = _layout(config)
    params = init_params(config.model)
    logger.info(f"모델 파라미터 수: {param_count(config.model):,}")
    trained, _ = sft_train(config.sft, train, params, layout, seed=seed, held_out=held_out,
                           metrics_path=paths["sft_metrics"])
    save_checkpoint(trained, paths["sft_ckpt"])
    write_manifest(out_dir, "sft", config, seed,
                   {"checkpoint": paths["sft_ckpt"], "metrics": paths["sft_metrics"]})
    return 0


def _rl_service(config: RunConfig, params: ModelParams):
    # rl 명령이 서비스 수명을 소유: local 은 프로세스 내, socket 은 port 0 이면 직접 띄우고 아니면 외부 접속
    service_config = config.service
    handle = None
    if service_config.transport == "socket" and service_config.port == 0:
        handle = serve(service_config, params=params, policy=config.rl.rollout_policy)
        service_config = dataclasses.replace(service_config, port=handle.address[1])
    factory = RolloutServiceFactory(service_config)
    service = factory.get_service(service_config.transport, params=params, policy=config.rl.rollout_policy)
    if service is None:
        raise ConfigError(f"service.transport 를 사용할 수 없습니다: {service_config.transport}")
    return service, handle


def cmd_rl(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    init_path = args.checkpoint or paths["sft_ckpt"]
    if not os.path.exists(init_path):
        raise BdlmError(f"RL 시작 체크포인트가 없습니다: {init_path} (먼저 sft 를 실행하세요)")
    params = load_checkpoint(init_path)
    train, held_out = _datasets(config, paths)
    layout = _layout(config)

    service, handle = _rl_service(config, params)
    try:
        trained, _ = rl_train(config.rl, train, params, layout, service=service,
                              held_out=held_out[:config.eval.max_samples], seed=seed,
                              report_path=paths["rl_report"])
        loads = service.version()["loads"]
    finally:
        service.close()
        if handle is not None:
            handle.stop()
    save_checkpoint(trained, paths["rl_ckpt"])
    write_manifest(out_dir, "rl", config, seed,
                   {"init": init_path, "checkpoint": paths["rl_ckpt"], "report": paths["rl_report"]},
                   {"service_loads": loads})
    return 0


def cmd_eval(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    checkpoint = _latest_checkpoint(paths, args.checkpoint)
    params = load_checkpoint(checkpoint)
    _, held_out = _datasets(config, paths)
    policy = config.decode.replace(temperature=config.eval.temperature)
    table = tau_sweep(params, held_out[:config.eval.max_samples], config.eval.taus, _layout(config), policy,
                      include_static=config.eval.include_static)
    table.to_csv(paths["eval_csv"], index=False)
    logger.info(f"평가 결과 저장: {paths['eval_csv']}\n{table.to_string(index=False)}")
    write_manifest(out_dir, "eval", config, seed, {"checkpoint": checkpoint, "eval": paths["eval_csv"]})
    return 0


def cmd_bench_mask(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    table = bench_mask(config.bench, seed=seed)
    table.to_csv(paths["bench_mask"], index=False)
    logger.info(f"마스크 벤치마크 저장: {paths['bench_mask']}\n{table.to_string(index=False)}")
    write_manifest(out_dir, "bench-mask", config, seed, {"report": paths["bench_mask"]})
    return 0


def cmd_bench_loop(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    checkpoint = args.checkpoint or (paths["sft_ckpt"] if os.path.exists(paths["sft_ckpt"]) else None)
    params = load_checkpoint(checkpoint) if checkpoint else init_params(config.model)
    train, _ = _datasets(config, paths)
    table, speedup = bench_loop(params, train, _layout(config), config.rl, config.bench,
                                os.path.join(out_dir, "bench_work"), seed=seed)
    table.to_csv(paths["bench_loop"], index=False)
    write_json(paths["bench_update"], speedup)
    summary = table.groupby("loop")[["Load", "Rollout", "Train", "Update", "total_ms"]].mean()
    logger.info(f"루프 벤치마크 저장: {paths['bench_loop']}\n{summary.to_string()}")
    write_manifest(out_dir, "bench-loop", config, seed,
                   {"report": paths["bench_loop"], "update": paths["bench_update"]})
    return 0


def cmd_serve(config: RunConfig, out_dir: str, seed: int, args) -> int:
    paths = _paths(out_dir)
    service_config = config.service
    if not service_config.checkpoint:
        service_config = dataclasses.replace(service_config, checkpoint=args.checkpoint or paths["sft_ckpt"])
    handle = serve(service_config, policy=config.decode)
    print(f"{handle.address[0]}:{handle.address[1]}", flush=True)
    try:
        handle.wait()
    except KeyboardInterrupt:
        logger.info("사용자 중단으로 서비스를 종료합니다.")
    finally:
        handle.stop()
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "sft": cmd_sft,
    "rl": cmd_rl,
    "eval": cmd_eval,
    "bench-mask": cmd_bench_mask,
    "bench-loop": cmd_bench_loop,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdlm", description="블록 확산 언어 모델 SFT + DiPO 파이프라인")
    parser.add_argument("command", choices=sorted(COMMANDS), help="실행할 명령")
    parser.add_argument("--config", default=DEFAULT_CONFIG, help="설정 파일 경로 (YAML 또는 JSON)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="점 경로 설정 덮어쓰기 (반복 가능)")
    parser.add_argument("--seed", type=int, default=None, help="실행 시드 (data.seed, model.seed 덮어씀)")
    parser.add_argument("--out", default="outputs", help="산출물 디렉토리 (BDLM_OUT 환경 변수가 우선)")
    parser.add_argument("--checkpoint", default=None, help="rl/eval/bench-loop/serve 에서 사용할 체크포인트")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    명령줄 진입점

    Returns:
        int: 종료 코드 (0 성공, 1 실행 오류, 2 설정 오류)
    """
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"data.seed={args.seed}", f"model.seed={args.seed}"]
    try:
        config = load_run_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"설정 오류: {str(e)}")
        print(f"설정 오류: {str(e)}", file=sys.stderr)
        return 2

    out_dir = os.getenv("BDLM_OUT") or args.out
    os.makedirs(out_dir, exist_ok=True)
    seed = config.data.seed
    seed_everything(seed)
    logger.info(f"{args.command} 시작 (설정 해시 {config.hash[:12]}, seed={seed}, 출력 {out_dir})")
    try:
        return COMMANDS[args.command](config, out_dir, seed, args)
    except ConfigError as e:
        logger.error(f"설정 오류: {str(e)}")
        print(f"설정 오류: {str(e)}", file=sys.stderr)
        return 2
    except (BdlmError, ValueError, OSError) as e:
        logger.error(f"{args.command} 실행 중 오류 발생: {str(e)}")
        print(f"오류: {str(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
