"""
ppgd コマンドの実行スクリプト

  ppgd run --config <file>
  ppgd run --config <file> --role alice|bob --listen HOST:PORT | --connect HOST:PORT
  ppgd sweep --spec <file> --out <csv>
  ppgd verify --config <file> [--rdf FILE]
  ppgd generate --seed <n> --n <count> --out <csv>
"""
import argparse
import logging
import os
import sys

from dotenv import load_dotenv

import cli_bench

# 環境変数の読み込み
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = None, log_file: str = None):
    """
    ログの設定（ファイルと標準エラーの両方に出力する）
    """
    level = (level or os.getenv("PPGD_LOG_LEVEL", "INFO")).upper()
    log_file = log_file or os.getenv("PPGD_LOG_FILE", "ppgd.log")
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_file, encoding="utf-8"),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgd",
        description="2パーティのプライバシー保護2段階予測（RDF一般化 + 勾配降下）のシミュレータ")
    parser.add_argument("--log-level", default=None, help="ログレベル（DEBUG, INFO, WARNING, ERROR）")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--transport", choices=["inproc", "socket"], default=None,
                        help="トランスポート（設定ファイルの TRANSPORT を上書き）")
    common.add_argument("--seed", type=int, default=None,
                        help="合成データのシード（設定ファイルの DATASET/SEED を上書き）")

    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="1回のセッションを実行する")
    p_run.add_argument("--config", required=True, help="設定ファイル（KEY=VALUE 形式）")
    p_run.add_argument("--role", choices=["alice", "bob"], default=None, help="2プロセス実行時の役割")
    group = p_run.add_mutually_exclusive_group()
    group.add_argument("--listen", metavar="HOST:PORT", default=None, help="待ち受けるアドレス")
    group.add_argument("--connect", metavar="HOST:PORT", default=None, help="接続先のアドレス")

    p_sweep = sub.add_parser("sweep", parents=[common], help="λ スイープを実行してCSVに書き出す")
    p_sweep.add_argument("--spec", required=True, help="スイープ指定ファイル")
    p_sweep.add_argument("--out", required=True, help="出力CSVのパス")
    p_sweep.add_argument("--parallel", action="store_true", default=None,
                         help="セルを並列に実行する（時間は参考値）")

    p_verify = sub.add_parser("verify", parents=[common], help="不変条件を検査する")
    p_verify.add_argument("--config", required=True, help="設定ファイル")
    p_verify.add_argument("--rdf", default=None, help="追加で検査するRDFファイル")

    p_gen = sub.add_parser("generate", help="合成データセットをCSVに書き出す")
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    """
    メイン関数
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    if args.command == "run":
        if args.role or args.listen or args.connect:
            if not args.role:
                print("❌ --listen/--connect には --role が必要です。")
                return cli_bench.EXIT_CONFIG
            return cli_bench.cmd_run_split(args.config, args.role, args.listen, args.connect, args.seed)
        return cli_bench.cmd_run(args.config, seed=args.seed, transport=args.transport)
    if args.command == "sweep":
        return cli_bench.cmd_sweep(args.spec, args.out, seed=args.seed,
                                   transport=args.transport, parallel=args.parallel)
    if args.command == "verify":
        return cli_bench.cmd_verify(args.config, args.rdf, seed=args.seed, transport=args.transport)
    if args.command == "generate":
        return cli_bench.cmd_generate(args.seed, args.n, args.out)
    return cli_bench.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
