"""
在玩具语料上运行一次流水线，把各阶段输出哈希与指标冻结为 tests/fixtures/toy_golden.json

哈希依赖浮点运算顺序（BLAS 实现），更换环境后需要重新冻结。
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from bt_confidence.pipeline import run_back_translation  # noqa: E402
from bt_confidence.toy_data import GOLDEN_SETTINGS, golden_summary, toy_pipeline_spec  # noqa: E402

LOG_FORMAT = "%(asctime)s (%(module)s:%(lineno)d) %(levelname)s: %(message)s"
DEFAULT_OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "toy_golden.json"


def main():
    parser = argparse.ArgumentParser(description="冻结玩具流水线的 manifest 哈希")
    parser.add_argument("--out", default=str(DEFAULT_OUT), help="输出 JSON 路径")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)

    with tempfile.TemporaryDirectory() as work:
        manifest = run_back_translation(toy_pipeline_spec(work, **GOLDEN_SETTINGS))
        summary = golden_summary(manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"已冻结 {len(summary['hashes'])} 个阶段 -> {out}")


if __name__ == "__main__":
    main()
