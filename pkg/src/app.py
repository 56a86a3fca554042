import argparse
import sys
from typing import List, Optional

import yaml
from dotenv import load_dotenv

from config.paths import ENV_PATH, RESULTS_DIR
from interface import commands
from utils.errors import EmToolkitError
from utils.logger import setup_logger

# Initialize the logger for the application
logger = setup_logger(name="app", log_filename="cli.log")


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def nonnegative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not an integer") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    """
    Command-line parser with one subcommand per solver.

    Flags shared by every subcommand (seed, restarts, tolerance, iteration
    cap, output directory and format, config file) are attached to each
    subparser so they may follow the subcommand name.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=nonnegative_int, help="master random seed")
    common.add_argument("--restarts", type=positive_int, help="number of EM restarts")
    common.add_argument("--tol", type=float, help="relative loglik change that stops EM")
    common.add_argument("--max-iter", dest="max_iter", type=positive_int, help="EM iteration cap per restart")
    common.add_argument("--workers", type=positive_int, help="threads for independent restarts")
    common.add_argument("--out", default=RESULTS_DIR, help="output directory")
    common.add_argument("--format", choices=("json", "tsv"), default="json",
                        help="json writes a report plus tables; tsv writes tables only")
    common.add_argument("--config", help="alternative solver YAML file")

    parser = argparse.ArgumentParser(prog="em-toolkit", description="EM solvers for sequence and population data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("motif", parents=[common], help="discover a fixed-width motif")
    p.add_argument("--fasta", required=True)
    p.add_argument("--width", type=positive_int, required=True)
    p.add_argument("--mode", choices=("oops", "zoops"))
    p.add_argument("--pseudocount", type=float)
    p.add_argument("--p0", type=float, help="initial site prior (zoops)")
    p.add_argument("--alphabet", choices=("dna", "protein"), default="dna")
    p.set_defaults(handler=commands.cmd_motif)

    phmm = sub.add_parser("phmm", help="profile HMM training and alignment")
    phmm_sub = phmm.add_subparsers(dest="action", required=True)
    p = phmm_sub.add_parser("train", parents=[common], help="Baum-Welch training on unaligned sequences")
    p.add_argument("--fasta", required=True)
    p.add_argument("--alphabet", choices=("dna", "protein"))
    p.add_argument("--weights", help="file with one sequence weight per line")
    p.add_argument("--pseudocount", type=float)
    p.set_defaults(handler=commands.cmd_phmm_train)
    p = phmm_sub.add_parser("align", parents=[common], help="Viterbi alignment against a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--fasta", required=True)
    p.add_argument("--alphabet", choices=("dna", "protein"), help="expected model alphabet")
    p.set_defaults(handler=commands.cmd_phmm_align)

    p = sub.add_parser("conserve", parents=[common], help="phylo-HMM conservation scores")
    p.add_argument("--alignment", required=True)
    p.add_argument("--tree", required=True)
    p.set_defaults(handler=commands.cmd_conserve)

    p = sub.add_parser("haplotype", parents=[common], help="haplotype frequencies and phases")
    p.add_argument("--genotypes", required=True)
    p.add_argument("--h-max", dest="h_max", type=positive_int)
    p.set_defaults(handler=commands.cmd_haplotype)

    p = sub.add_parser("cluster", parents=[common], help="Gaussian mixture clustering")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--k", type=positive_int)
    group.add_argument("--k-range", dest="k_range", type=commands.parse_k_range, help="'a:b' or 'a,b,c'")
    p.add_argument("--family", choices=("spherical", "diagonal", "full", "shared"))
    p.add_argument("--rcem-c", dest="rcem_c", type=float, help="RCEM threshold in (0, 1)")
    p.set_defaults(handler=commands.cmd_cluster)

    simulate = sub.add_parser("simulate", help="synthetic datasets with ground truth")
    sim_sub = simulate.add_subparsers(dest="kind", required=True)
    p = sim_sub.add_parser("phylo", parents=[common])
    p.add_argument("--tree", help="Newick file (default: a four-leaf tree)")
    p.add_argument("--length", type=positive_int, default=1000)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--nu", type=float, default=0.05)
    p.add_argument("--rho", type=float, default=0.3)
    p.set_defaults(handler=commands.cmd_simulate)
    p = sim_sub.add_parser("motif", parents=[common])
    p.add_argument("--num-seqs", dest="num_seqs", type=positive_int, default=20)
    p.add_argument("--length", type=positive_int, default=50)
    p.add_argument("--width", type=positive_int, default=8)
    p.set_defaults(handler=commands.cmd_simulate)
    p = sim_sub.add_parser("mixture", parents=[common])
    p.add_argument("--means", default="0,10", help="comma-separated component means")
    p.add_argument("--sds", default="1,1", help="comma-separated component standard deviations")
    p.add_argument("--n", type=positive_int, default=200)
    p.set_defaults(handler=commands.cmd_simulate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand and return its exit code.

    Returns
    -------
    int
        0 on success, 1 when the input data or a solver fails, 2 on a usage
        error.

    Notes
    -----
    - Environment variables (log directory and level) may come from a
      `.env` file at the repository root.
    - The human summary goes to stdout; logs go to stderr and the log files.
    """
    load_dotenv(ENV_PATH)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    command = " ".join(filter(None, [args.command, getattr(args, "action", None), getattr(args, "kind", None)]))
    logger.info(f"Running '{command}'")
    try:
        report = args.handler(args)
    except (EmToolkitError, ValueError, OSError, yaml.YAMLError) as e:
        logger.error(f"'{command}' failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1

    for line in report.summary:
        print(line)
    for path in report.outputs:
        print(f"wrote {path}")
    logger.info(f"'{command}' finished in {report.duration_seconds:.3f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
