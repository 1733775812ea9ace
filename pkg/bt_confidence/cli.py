"""
命令行入口

    bt-confidence bpe       学习 BPE 并构建词表（输出编解码器 JSON），可选地切分文件
    bt-confidence train     最大似然训练（可混入带置信度的合成语料）
    bt-confidence translate 用检查点翻译文本（search / sample / greedy）
    bt-confidence score     对合成语料做置信度打分（ptp / exp / var / cev）
    bt-confidence pipeline  运行完整的回译流水线
    bt-confidence eval      计算 BLEU，给出第二个系统时做成对自助重采样检验

失败时向 stderr 输出一行 "error: <异常类名>: <信息>"，退出码为 2（意外异常为 1）。
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .config import RunConfig
from .confidence import MeasureKind, attach_confidences, read_confidence_file, score_corpus_to_file
from .data import (Provenance, SentencePair, TextCodec, apply_bpe, encode_corpus, pretokenize,
                   read_lines, read_parallel, write_lines)
from .decode import translate_corpus
from .errors import BtConfidenceError, ConfigError, DataError
from .evaluation import bleu, paired_bootstrap
from .model import ModelCheckpoint
from .numerics import RngStream
from .pipeline import SYNTHETIC_ID_OFFSET, load_synthetic, run_back_translation, save_synthetic
from .training import Trainer, mix_corpora

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s (%(module)s:%(lineno)d) %(levelname)s: %(message)s"
EXIT_ERROR = 2
EXIT_UNEXPECTED = 1


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML 运行配置文件（model / training / decode / confidence / pipeline）")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="覆盖配置项，可重复，例如 --set training.max_steps=500")
    common.add_argument("--seed", type=int, help="主随机种子（写入 training / decode / pipeline 的 seed）")
    common.add_argument("--threads", type=int, help="解码与 MC 打分的最大线程数（默认 1）")
    common.add_argument("--no-progress", action="store_true", help="关闭进度条")
    common.add_argument("-v", "--verbose", action="store_true", help="输出 DEBUG 级日志")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="bt-confidence", description="带不确定性置信度的回译工具包")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("bpe", parents=[common], help="学习 BPE 并构建词表")
    p.add_argument("--input", nargs="+", required=True, help="用于学习 BPE 的文本文件（每行一句）")
    p.add_argument("--merges", type=int, default=None, help="合并操作数（默认取 pipeline.bpe_merges）")
    p.add_argument("--codec-out", required=True, help="输出的编解码器 JSON（BPE + 词表）")
    p.add_argument("--model-out", help="另外写出纯文本 BPE 模型文件")
    p.add_argument("--vocab-out", help="另外写出词表文件（每行一个 token）")
    p.add_argument("--segment", help="用学到的 BPE 切分该文件")
    p.add_argument("--output", help="切分结果的输出路径（与 --segment 配合）")
    p.set_defaults(handler=cmd_bpe)

    p = sub.add_parser("train", parents=[common], help="训练翻译模型")
    p.add_argument("--source", required=True, help="真实平行语料的源端文件")
    p.add_argument("--target", required=True, help="真实平行语料的目标端文件")
    p.add_argument("--src-codec", help="源端编解码器 JSON（默认在训练语料上学习）")
    p.add_argument("--tgt-codec", help="目标端编解码器 JSON（默认在训练语料上学习）")
    p.add_argument("--synthetic", help="合成语料 JSONL（translate --synthetic-out 的输出）")
    p.add_argument("--confidence", help="合成语料的置信度 JSONL（score 的输出）")
    p.add_argument("--ratio", help="真实:合成 比例，默认取 pipeline.ratio")
    p.add_argument("--init", help="从该检查点的参数开始训练（微调）")
    p.add_argument("--direction", choices=["forward", "reverse"], default="forward", help="写入检查点的方向标记")
    p.add_argument("--max-steps", type=int, help="训练步数上限（覆盖 training.max_steps）")
    p.add_argument("--log", help="训练日志 CSV 路径")
    p.add_argument("--output", required=True, help="输出检查点 (.npz)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("translate", parents=[common], help="用检查点翻译文本")
    p.add_argument("--checkpoint", required=True, help="模型检查点 (.npz)")
    p.add_argument("--input", required=True, help="待翻译文本（每行一句）")
    p.add_argument("--output", required=True, help="译文输出路径")
    p.add_argument("--mode", choices=["search", "beam", "sample", "greedy"], help="解码方式（search 即束搜索）")
    p.add_argument("--beam", type=int, help="束大小")
    p.add_argument("--temperature", type=float, help="采样温度")
    p.add_argument("--max-len", type=int, help="输出长度上限")
    p.add_argument("--synthetic-out", help="同时写出合成语料 JSONL（预测 + 逐步对数概率），供 score/train 使用")
    p.set_defaults(handler=cmd_translate)

    p = sub.add_parser("score", parents=[common], help="对合成语料做置信度打分")
    p.add_argument("--checkpoint", required=True, help="产生预测的反向模型检查点")
    p.add_argument("--synthetic", help="合成语料 JSONL（translate --synthetic-out 的输出）")
    p.add_argument("--source", help="预测文本 x̂（与 --target 一起代替 --synthetic）")
    p.add_argument("--target", help="单语句子 y（与 --source 对齐）")
    p.add_argument("--measure", choices=[k.value for k in MeasureKind if k != MeasureKind.NONE],
                   help="置信度度量")
    p.add_argument("--k", type=int, help="MC Dropout 前向次数（PTP 忽略）")
    p.add_argument("--alpha", type=float, help="VAR 的指数 α")
    p.add_argument("--beta", type=float, help="CEV 的指数 β")
    p.add_argument("--dropout", type=float, help="MC 前向的 dropout 比例（默认沿用训练时的比例）")
    p.add_argument("--uncertainty-out", help="另外写出期望/方差打分记录 JSONL")
    p.add_argument("--output", required=True, help="置信度 JSONL 输出路径（已存在时断点续跑）")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("pipeline", parents=[common], help="运行完整的回译流水线")
    p.add_argument("--output-dir", help="输出目录（默认取 $BT_CONFIDENCE_OUTPUT_DIR 或 runs）")
    p.add_argument("--run-name", help="manifest 文件名前缀")
    p.add_argument("--iterations", type=int, help="回译迭代次数")
    p.add_argument("--generation", choices=["none", "search", "sample"], help="合成语料的生成方式")
    p.add_argument("--measure", choices=[k.value for k in MeasureKind], help="置信度度量（none 表示不打分）")
    p.set_defaults(handler=cmd_pipeline)

    p = sub.add_parser("eval", parents=[common], help="计算 BLEU 与显著性")
    p.add_argument("--hyp", required=True, help="系统 A 的译文")
    p.add_argument("--ref", required=True, help="参考译文")
    p.add_argument("--hyp-b", help="系统 B 的译文（给出时做成对自助重采样）")
    p.add_argument("--resamples", type=int, default=1000, help="重采样次数")
    p.add_argument("--json", dest="json_out", help="把报告另存为 JSON")
    p.set_defaults(handler=cmd_eval)
    return parser


def _run_config(args: argparse.Namespace, extra: Optional[Dict] = None) -> RunConfig:
    return RunConfig(args.command, args.config, list(args.overrides), args.seed, extra or {})


def _put(extra: Dict, section: str, key: str, value):
    if value is not None:
        extra.setdefault(section, {})[key] = value


def _load_codec(path: str) -> TextCodec:
    return TextCodec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _write_json(path: str, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- 子命令

def cmd_bpe(args: argparse.Namespace) -> int:
    run = _run_config(args)
    merges = args.merges if args.merges is not None else int(run.resolved["pipeline"]["bpe_merges"])
    lines: List[str] = []
    for path in args.input:
        lines.extend(read_lines(path))
    codec = TextCodec.fit(lines, merges)
    _write_json(args.codec_out, codec.to_dict())
    if args.model_out:
        codec.bpe.save(args.model_out)
    if args.vocab_out:
        codec.vocab.save(args.vocab_out)
    if args.segment:
        if not args.output:
            raise ConfigError("--segment 需要同时给出 --output")
        write_lines(args.output, [" ".join(apply_bpe(pretokenize(s), codec.bpe)) for s in read_lines(args.segment)])
    print(f"merges={codec.bpe.merge_count} vocab={len(codec.vocab)} -> {args.codec_out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    extra: Dict = {}
    _put(extra, "training", "max_steps", args.max_steps)
    _put(extra, "pipeline", "ratio", args.ratio)
    run = _run_config(args, extra)
    training = run.training_config()
    src, tgt = read_parallel(args.source, args.target)
    merges = int(run.resolved["pipeline"]["bpe_merges"])
    src_codec = _load_codec(args.src_codec) if args.src_codec else TextCodec.fit(src, merges)
    tgt_codec = _load_codec(args.tgt_codec) if args.tgt_codec else TextCodec.fit(tgt, merges)
    authentic = encode_corpus(src, tgt, src_codec, tgt_codec)

    synthetic: List[SentencePair] = []
    if args.synthetic:
        synthetic = [p for p in load_synthetic(args.synthetic) if p.source]
        if args.confidence:
            synthetic = attach_confidences(synthetic, read_confidence_file(args.confidence))
        elif training.uses_confidence:
            raise ConfigError("训练开启了置信度，但没有给出 --confidence 文件"
                              "（或用 --set training.sentence_confidence=false --set training.word_confidence=false）")
    if args.confidence and not args.synthetic:
        raise ConfigError("--confidence 需要与 --synthetic 一起使用")

    initial = None
    if args.init:
        initial = ModelCheckpoint.load(args.init).params
    model_config = run.model_config(len(src_codec.vocab), len(tgt_codec.vocab))
    ratio = run.resolved["pipeline"]["ratio"]
    require = training.uses_confidence and bool(synthetic)
    trainer = Trainer(model_config, training, src_codec, tgt_codec, initial, progress=not args.no_progress)
    checkpoint = trainer.fit(lambda e: mix_corpora(authentic, synthetic, ratio, training.seed, e, require))
    checkpoint.metadata["direction"] = args.direction
    checkpoint.save(args.output)
    if args.log:
        trainer.save_log(args.log)
    print(f"steps={checkpoint.step} loss={checkpoint.metadata.get('final_loss')} -> {args.output}")
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    extra: Dict = {}
    _put(extra, "decode", "mode", args.mode)
    _put(extra, "decode", "beam_size", args.beam)
    _put(extra, "decode", "temperature", args.temperature)
    _put(extra, "decode", "max_len", args.max_len)
    run = _run_config(args, extra)
    decode_config = run.decode_config()
    checkpoint = ModelCheckpoint.load(args.checkpoint)
    if checkpoint.src_codec is None or checkpoint.tgt_codec is None:
        raise DataError(f"检查点 {args.checkpoint} 中没有编解码器，无法翻译文本")
    lines = read_lines(args.input)
    limit = checkpoint.config.max_len
    encoded = []
    for line in lines:
        ids = checkpoint.src_codec.encode(line)
        if len(ids) > limit:
            logger.warning(f"输入长度 {len(ids)} 超过 max_len={limit}，已截断")
            ids = ids[:limit]
        encoded.append(ids)
    hyps = translate_corpus(encoded, checkpoint.params, checkpoint.config, decode_config, args.threads or 1,
                            progress=not args.no_progress)
    write_lines(args.output, [checkpoint.tgt_codec.decode(h.tokens) for h in hyps])
    if args.synthetic_out:
        pairs = [
            SentencePair(SYNTHETIC_ID_OFFSET + i, list(h.tokens), list(src), Provenance.SYNTHETIC,
                         step_logprobs=list(h.step_logprobs), finished=h.finished)
            for i, (src, h) in enumerate(zip(encoded, hyps))
        ]
        save_synthetic(args.synthetic_out, pairs)
    truncated = sum(1 for h in hyps if h.truncated)
    if truncated:
        logger.warning(f"{truncated} 句达到长度上限被截断")
    print(f"translated={len(hyps)} mode={decode_config.mode.value} -> {args.output}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    extra: Dict = {}
    _put(extra, "confidence", "kind", args.measure)
    _put(extra, "confidence", "k", args.k)
    _put(extra, "confidence", "alpha", args.alpha)
    _put(extra, "confidence", "beta", args.beta)
    _put(extra, "confidence", "dropout", args.dropout)
    run = _run_config(args, extra)
    measure = run.measure_config()
    if measure.kind == MeasureKind.NONE:
        raise ConfigError("score 需要一个置信度度量（--measure ptp|exp|var|cev）")
    if measure.kind == MeasureKind.PTP and args.k is not None:
        logger.warning("PTP 不需要 MC 采样，忽略 --k")

    checkpoint = ModelCheckpoint.load(args.checkpoint)
    if args.synthetic:
        pairs = load_synthetic(args.synthetic)
    elif args.source and args.target:
        if checkpoint.src_codec is None or checkpoint.tgt_codec is None:
            raise DataError(f"检查点 {args.checkpoint} 中没有编解码器，无法编码文本")
        x_hat, mono = read_parallel(args.source, args.target)
        pairs = [
            SentencePair(SYNTHETIC_ID_OFFSET + i, checkpoint.tgt_codec.encode(x), checkpoint.src_codec.encode(y),
                         Provenance.SYNTHETIC)
            for i, (x, y) in enumerate(zip(x_hat, mono))
        ]
    else:
        raise ConfigError("需要 --synthetic，或者同时给出 --source 与 --target")
    records = score_corpus_to_file(args.output, pairs, checkpoint, measure, rng=RngStream(run.master_seed),
                                   threads=args.threads or 1, uncertainty_path=args.uncertainty_out,
                                   progress=not args.no_progress)
    values = [r.sentence_confidence for r in records.values()]
    mean = sum(values) / len(values) if values else float("nan")
    print(f"scored={len(values)} measure={measure.kind.value} mean_confidence={mean:.4f} -> {args.output}")
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    extra: Dict = {}
    _put(extra, "pipeline", "output_dir", args.output_dir)
    _put(extra, "pipeline", "run_name", args.run_name)
    _put(extra, "pipeline", "iterations", args.iterations)
    _put(extra, "pipeline", "generation", args.generation)
    _put(extra, "pipeline", "threads", args.threads)
    _put(extra, "confidence", "kind", args.measure)
    if args.measure == MeasureKind.NONE.value:
        _put(extra, "training", "sentence_confidence", False)
        _put(extra, "training", "word_confidence", False)
    run = _run_config(args, extra)
    spec = run.pipeline_spec()
    spec.progress = not args.no_progress
    manifest = run_back_translation(spec)
    for name, score in sorted(manifest.metrics.get("bleu", {}).items()):
        print(f"{name}\t{score:.2f}")
    print(f"manifest -> {Path(spec.output_dir) / (spec.run_name + '.manifest.json')}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = _run_config(args)
    hyp = read_lines(args.hyp)
    ref = read_lines(args.ref)
    report = bleu(hyp, ref)
    print(report)
    out = {"a": report.to_dict()}
    if args.hyp_b:
        hyp_b = read_lines(args.hyp_b)
        sig = paired_bootstrap(hyp, hyp_b, ref, resamples=args.resamples, seed=run.master_seed)
        out["b"] = bleu(hyp_b, ref).to_dict()
        out["significance"] = sig.to_dict()
        print(f"A={sig.bleu_a:.2f} B={sig.bleu_b:.2f} better={sig.better} p={sig.p_value:.4f} "
              f"({sig.resamples} resamples, seed={sig.seed})")
    if args.json_out:
        _write_json(args.json_out, out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except (BtConfidenceError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:
        logger.exception(f"意外错误: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
