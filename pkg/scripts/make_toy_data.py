"""
生成玩具词映射语料（真实平行语料、单语语料、测试集）
"""

import argparse
import logging
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from bt_confidence.toy_data import make_mapping_task  # noqa: E402

LOG_FORMAT = "%(asctime)s (%(module)s:%(lineno)d) %(levelname)s: %(message)s"


def main():
    parser = argparse.ArgumentParser(description="生成玩具词映射语料")
    parser.add_argument("--out-dir", default="data/toy", help="输出目录")
    parser.add_argument("--authentic", type=int, default=200, help="真实平行句对数")
    parser.add_argument("--mono", type=int, default=400, help="目标端单语句子数")
    parser.add_argument("--test", type=int, default=50, help="每个测试集的句子数")
    parser.add_argument("--vocab", type=int, default=40, help="每种语言的词数")
    parser.add_argument("--seed", type=int, default=0, help="随机种子")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)

    task = make_mapping_task(n_authentic=args.authentic, n_mono=args.mono, n_test=args.test,
                             vocab_size=args.vocab, seed=args.seed)
    paths = task.write(args.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
