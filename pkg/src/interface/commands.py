"""
One handler per subcommand. Each reads its inputs, resolves settings
(flags over the YAML file over code defaults), runs a solver, writes its
output files and returns a RunReport.
"""

import argparse
import json
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config.config_loader import load_solver_config
from config.paths import SOLVER_CONFIG_FPATH
from core import haplotype, mixture, motif, phylo_hmm, profile_hmm
from core.em import EmConfig
from data_processing.genotypes import parse_genotypes
from data_processing.matrix_io import parse_matrix, write_matrix
from data_processing.newick import PhyloTree, parse_tree
from data_processing.seqio import DNA, Alphabet, parse_alignment, parse_fasta, write_alignment, write_fasta
from interface.reports import RunReport, digest_inputs, to_json, write_atomic, write_json, write_table
from utils.errors import DataError
from utils.logger import setup_logger

# Initialize the logger for command handlers
logger = setup_logger(name="cli", log_filename="cli.log")

# Balanced four-leaf tree used by `simulate phylo` when no tree file is given
DEFAULT_TREE = "((s1:0.1,s2:0.2):0.05,(s3:0.15,s4:0.1):0.05);"


def read_input(path: str) -> bytes:
    """
    Read an input file as raw bytes.

    The bytes are parsed by the caller and also hashed into the report's
    input digest, so no decoding happens here.

    Raises
    ------
    FileNotFoundError
        If `path` does not exist.
    """
    with open(path, "rb") as f:
        return f.read()


def _section(args: argparse.Namespace, name: str, defaults: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return load_solver_config(name, defaults, file_path=args.config or SOLVER_CONFIG_FPATH)


def em_config(args: argparse.Namespace) -> EmConfig:
    """EmConfig from the YAML `em` section with command-line overrides."""
    values = _section(args, "em")
    for flag in ("seed", "restarts", "tol", "max_iter", "workers"):
        if getattr(args, flag, None) is not None:
            values[flag] = getattr(args, flag)
    return EmConfig.from_dict(values)


def _overlay(values: Dict[str, Any], args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, Any]:
    for flag, key in mapping.items():
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return values


def _finish(
    args: argparse.Namespace, solver: str, inputs: List[bytes], config: Dict[str, Any],
    results: Dict[str, Any], trace: Any, started: float, outputs: List[Path], summary: List[str],
) -> RunReport:
    report = RunReport(
        solver=solver, input_digest=digest_inputs(*inputs), config=config, results=results,
        trace=trace, duration_seconds=time.perf_counter() - started,
    )
    if args.format == "json":
        outputs.append(write_json(Path(args.out) / f"{solver}_report.json", report.to_dict()))
    report.outputs = [str(path) for path in outputs]
    report.summary = summary
    return report


def cmd_motif(args: argparse.Namespace) -> RunReport:
    """
    Discover one motif in a FASTA file and report its best site per sequence.

    Parameters
    ----------
    args : argparse.Namespace
        Parsed `motif` arguments: input path, alphabet, width, mode and EM flags.

    Returns
    -------
    RunReport
        The fitted model, consensus, sites and EM trace; `motif_sites.tsv` is
        written to the output directory.
    """
    started = time.perf_counter()
    raw = read_input(args.fasta)
    alphabet = Alphabet.from_name(args.alphabet)
    seqs = parse_fasta(raw, alphabet)

    settings = _overlay(_section(args, "motif"), args, {
        "width": "width", "mode": "mode", "pseudocount": "pseudocount", "p0": "p0",
    })
    config = motif.MotifConfig.from_dict(settings)
    em = em_config(args)

    model, posterior, trace = motif.discover(seqs, config, em, alphabet)

    # One row per sequence at its most probable start
    sites = motif.best_sites(posterior)
    rows = []
    for seq, (start, prob) in zip(seqs, sites):
        rows.append({
            "sequence": seq.id,
            "start": start,
            "site": alphabet.decode(seq.residues[start:start + config.width]),
            "posterior": prob,
        })
    table = pd.DataFrame(rows, columns=["sequence", "start", "site", "posterior"])
    outputs = [write_table(Path(args.out) / "motif_sites.tsv", table)]

    # Most probable residue per motif column
    consensus = alphabet.decode(np.argmax(model.theta, axis=1))
    results = {"model": model.to_dict(alphabet), "consensus": consensus, "sites": rows,
               "loglik": trace.final_loglik}
    summary = [
        f"motif: {len(seqs)} sequences, width {config.width}, mode {config.mode}",
        f"consensus {consensus}, objective {trace.final_loglik:.4f}, "
        f"{trace.iterations} iterations, converged={trace.converged}",
    ]
    echo = {"em": asdict(em), "motif": asdict(config), "alphabet": alphabet.kind}
    return _finish(args, "motif", [raw], echo, results, trace.to_dict(), started, outputs, summary)


def _read_weights(path: Optional[str], count: int) -> Tuple[Optional[List[float]], bytes]:
    if path is None:
        return None, b""
    raw = read_input(path)
    values = [line.strip() for line in raw.decode("utf-8").splitlines() if line.strip()]
    try:
        weights = [float(value) for value in values]
    except ValueError as e:
        raise DataError(f"Sequence weights must be numbers: {e}") from e
    if len(weights) != count:
        raise DataError(f"Got {len(weights)} weights for {count} sequences")
    return weights, raw


def cmd_phmm_train(args: argparse.Namespace) -> RunReport:
    """
    Train a profile HMM on unaligned sequences and save it as `phmm_model.json`.

    Parameters
    ----------
    args : argparse.Namespace
        Parsed `phmm train` arguments: FASTA path, optional weights file,
        alphabet, pseudocount and EM flags.

    Returns
    -------
    RunReport
        Model size, final objective and the EM trace.

    Raises
    ------
    DataError
        If the weights file does not hold one number per sequence.
    """
    started = time.perf_counter()
    settings = _overlay(_section(args, "profile_hmm"), args, {"alphabet": "alphabet", "pseudocount": "pseudocount"})
    alphabet = Alphabet.from_name(settings.get("alphabet", "protein"))
    raw = read_input(args.fasta)
    seqs = parse_fasta(raw, alphabet)
    # Unit weights when no file is given
    weights, raw_weights = _read_weights(args.weights, len(seqs))
    alpha = float(settings.get("pseudocount", 0.5))
    em = em_config(args)

    hmm, trace = profile_hmm.train(
        seqs, weights, em, alpha=alpha, alphabet=alphabet,
        match_transition=float(settings.get("match_transition", 0.8)),
    )
    outputs = [write_atomic(Path(args.out) / "phmm_model.json", to_json(hmm.to_dict()))]
    results = {"M": hmm.num_match, "loglik": trace.final_loglik, "model_file": "phmm_model.json"}
    summary = [
        f"phmm train: {len(seqs)} sequences, M = {hmm.num_match}",
        f"objective {trace.final_loglik:.4f}, {trace.iterations} iterations, converged={trace.converged}",
    ]
    echo = {"em": asdict(em), "alphabet": alphabet.kind, "pseudocount": alpha}
    return _finish(args, "phmm_train", [raw, raw_weights], echo, results, trace.to_dict(), started, outputs, summary)


def cmd_phmm_align(args: argparse.Namespace) -> RunReport:
    """
    Align sequences to a saved profile HMM by their Viterbi paths.

    Returns
    -------
    RunReport
        Column count and per-sequence path log-probabilities; the alignment
        is written to `phmm_alignment.fa`.

    Raises
    ------
    DataError
        If the model file is not valid JSON or its alphabet differs from `--alphabet`.
    """
    started = time.perf_counter()
    raw_model = read_input(args.model)
    try:
        hmm = profile_hmm.ProfileHmm.from_dict(json.loads(raw_model.decode("utf-8")))
    except ValueError as e:
        raise DataError(f"Model file is not valid JSON: {e}") from e
    if args.alphabet is not None and Alphabet.from_name(args.alphabet) != hmm.alphabet:
        raise DataError(f"Model alphabet is {hmm.alphabet.kind}, not {args.alphabet}")

    # Sequences are read in the model's alphabet
    raw = read_input(args.fasta)
    seqs = parse_fasta(raw, hmm.alphabet)
    alignment, scores = profile_hmm.align(hmm, seqs)
    outputs = [write_atomic(Path(args.out) / "phmm_alignment.fa", write_alignment(alignment))]
    results = {
        "columns": alignment.num_columns,
        "paths": [{"sequence": seq.id, "log_probability": score} for seq, score in zip(seqs, scores)],
    }
    summary = [f"phmm align: {len(seqs)} sequences into {alignment.num_columns} columns"]
    return _finish(args, "phmm_align", [raw_model, raw], {"alphabet": hmm.alphabet.kind}, results, None,
                   started, outputs, summary)


def cmd_conserve(args: argparse.Namespace) -> RunReport:
    """
    Fit the two-state phylo-HMM to an alignment and write a per-column
    conservation track.

    Parameters
    ----------
    args : argparse.Namespace
        Parsed `conserve` arguments: aligned FASTA, Newick tree and EM flags.

    Returns
    -------
    RunReport
        Fitted mu, nu, rho and branch lengths, the objective and the EM trace;
        `conservation_track.tsv` holds P(conserved) per column.
    """
    started = time.perf_counter()
    settings = _section(args, "phylo_hmm")
    raw_alignment = read_input(args.alignment)
    raw_tree = read_input(args.tree)
    alignment = parse_alignment(raw_alignment, DNA)
    tree = parse_tree(raw_tree, float(settings.get("default_branch_length", 0.1)))
    em = em_config(args)

    params, trace = phylo_hmm.fit(
        alignment, tree, em,
        rho_bounds=tuple(settings.get("rho_bounds", phylo_hmm.RHO_BOUNDS)),
        branch_bounds=tuple(settings.get("branch_bounds", phylo_hmm.BRANCH_BOUNDS)),
        optimizer_tol=float(settings.get("optimizer_tol", phylo_hmm.OPTIMIZER_TOL)),
    )
    # Posterior of the conserved state at every column
    scores = phylo_hmm.conservation_scores(alignment, tree, params)
    track = pd.DataFrame({"column": np.arange(scores.shape[0]), "score": scores})
    outputs = [write_table(Path(args.out) / "conservation_track.tsv", track)]

    results = {"params": params.to_dict(tree), "loglik": trace.final_loglik,
               "mean_score": float(scores.mean())}
    summary = [
        f"conserve: {alignment.num_rows} leaves, {alignment.num_columns} columns",
        f"mu={params.mu:.4f} nu={params.nu:.4f} rho={params.rho:.4f}, loglik {trace.final_loglik:.4f}",
    ]
    echo = {"em": asdict(em), "phylo_hmm": settings}
    return _finish(args, "conserve", [raw_alignment, raw_tree], echo, results, trace.to_dict(),
                   started, outputs, summary)


def cmd_haplotype(args: argparse.Namespace) -> RunReport:
    """
    Estimate haplotype frequencies from unphased genotypes and phase every individual.

    Returns
    -------
    RunReport
        Pool size, frequencies, the most probable pair per individual and the
        EM trace; both tables are also written as TSV files.
    """
    started = time.perf_counter()
    settings = _overlay(_section(args, "haplotype"), args, {"h_max": "h_max"})
    raw = read_input(args.genotypes)
    table = parse_genotypes(raw)
    em = em_config(args)

    pool, best, trace = haplotype.phase(
        table, em,
        h_max=int(settings.get("h_max", haplotype.H_MAX)),
        floor=float(settings.get("frequency_floor", haplotype.FREQUENCY_FLOOR)),
        report_zero_below=float(settings.get("report_zero_below", haplotype.REPORT_ZERO_BELOW)),
    )
    # Haplotypes are reported as allele strings over the table's loci
    names = pool.render(table)
    frequencies = [{"haplotype": name, "frequency": float(f)} for name, f in zip(names, pool.frequencies)]
    phases = [
        {"individual": individual, "haplotype1": names[pair.first], "haplotype2": names[pair.second],
         "posterior": pair.posterior}
        for individual, pair in zip(table.ids, best)
    ]
    outputs = [
        write_table(Path(args.out) / "haplotype_phases.tsv", pd.DataFrame(phases)),
        write_table(Path(args.out) / "haplotype_frequencies.tsv", pd.DataFrame(frequencies)),
    ]
    results = {"pool_size": len(pool), "frequencies": frequencies, "phases": phases, "loglik": trace.final_loglik}
    summary = [
        f"haplotype: {table.num_individuals} individuals, {table.num_loci} loci, pool of {len(pool)}",
        f"loglik {trace.final_loglik:.4f}, {trace.iterations} iterations, converged={trace.converged}",
    ]
    echo = {"em": asdict(em), "haplotype": settings}
    return _finish(args, "haplotype", [raw], echo, results, trace.to_dict(), started, outputs, summary)


def parse_k_range(text: str) -> List[int]:
    """'a:b' (inclusive) or a comma-separated list of positive integers."""
    try:
        if ":" in text:
            low, high = (int(part) for part in text.split(":"))
            values = list(range(low, high + 1))
        else:
            values = [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K range '{text}'") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"K range '{text}' must list positive integers")
    return values


def cmd_cluster(args: argparse.Namespace) -> RunReport:
    """
    Fit a Gaussian mixture to a numeric matrix, either at a fixed K or at the
    K with the lowest BIC over `--k-range`.

    Parameters
    ----------
    args : argparse.Namespace
        Parsed `cluster` arguments: data path, K or K range, covariance
        family, optional RCEM threshold and EM flags.

    Returns
    -------
    RunReport
        The chosen model, BIC, log-likelihood and hard assignments; with a K
        range the BIC table is included and written to `cluster_bic.tsv`.
    """
    started = time.perf_counter()
    settings = _overlay(_section(args, "mixture"), args, {"family": "family", "rcem_c": "rcem_c"})
    raw = read_input(args.data)
    ids, columns, data = parse_matrix(raw)
    em = em_config(args)
    family = str(settings.get("family", mixture.FULL))
    ridge_factor = float(settings.get("ridge_factor", mixture.RIDGE_FACTOR))
    # RCEM draws from its own stream under the run seed
    rcem = None
    if args.rcem_c is not None:
        rcem = mixture.RcemConfig(threshold=float(args.rcem_c), seed=em.seed)

    outputs = []
    results: Dict[str, Any] = {}
    if args.k_range is not None:
        selection = mixture.select_k(data, args.k_range, family, em, rcem, ridge_factor)
        model, k, gamma, trace = selection.model, selection.k, selection.responsibilities, selection.trace
        results["bic_table"] = selection.table
        outputs.append(write_table(Path(args.out) / "cluster_bic.tsv", pd.DataFrame(selection.table)))
    else:
        model, gamma, trace = mixture.fit(data, args.k, family, em, rcem, ridge_factor)
        k = args.k

    # Hard assignment to the most responsible component
    labels = mixture.assignments(gamma)
    outputs.append(write_table(
        Path(args.out) / "cluster_assignments.tsv",
        pd.DataFrame({"id": ids, "cluster": labels, "responsibility": gamma[np.arange(len(ids)), labels]}),
    ))
    results.update({
        "K": k,
        "model": model.to_dict(),
        "bic": mixture.bic(model, data),
        "loglik": mixture.loglik(data, model),
        "assignments": labels.tolist(),
        "columns": columns,
    })
    summary = [
        f"cluster: {data.shape[0]} points, {data.shape[1]} columns, {family} family{', RCEM' if rcem else ''}",
        f"K = {k}, BIC {results['bic']:.4f}, sizes {np.bincount(labels, minlength=k).tolist()}",
    ]
    echo = {"em": asdict(em), "family": family, "ridge_factor": ridge_factor,
            "rcem_c": None if rcem is None else rcem.threshold}
    return _finish(args, "cluster", [raw], echo, results, trace.to_dict(), started, outputs, summary)


def _parse_numbers(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise DataError(f"Invalid number list '{text}'") from None


def _simulate_phylo(args: argparse.Namespace, out: Path, seed: int) -> Tuple[Dict[str, Any], List[Path], List[bytes]]:
    raw_tree = read_input(args.tree) if args.tree else DEFAULT_TREE.encode("utf-8")
    tree: PhyloTree = parse_tree(raw_tree)
    params = phylo_hmm.PhyloHmmParams(
        mu=args.mu, nu=args.nu, rho=args.rho, branch_lengths=tree.branch_lengths[1:],
    )
    alignment, states = phylo_hmm.simulate(tree, params, args.length, seed)
    truth = {"params": params.to_dict(tree), "length": args.length, "seed": seed,
             "states": ["c" if s == phylo_hmm.CONSERVED else "n" for s in states]}
    outputs = [
        write_atomic(out / "simulated_alignment.fa", write_alignment(alignment)),
        write_atomic(out / "simulated_tree.nwk", (tree.to_newick() + "\n").encode("utf-8")),
    ]
    return truth, outputs, [raw_tree]


def _simulate_motif(args: argparse.Namespace, out: Path, seed: int) -> Tuple[Dict[str, Any], List[Path], List[bytes]]:
    seqs, planted, starts = motif.plant_motif(args.num_seqs, args.length, args.width, seed, DNA)
    truth = {"motif": DNA.decode(planted), "starts": starts, "width": args.width, "seed": seed,
             "sequences": [seq.id for seq in seqs]}
    return truth, [write_atomic(out / "simulated_motif.fa", write_fasta(seqs, DNA))], []


def _simulate_mixture(args: argparse.Namespace, out: Path, seed: int) -> Tuple[Dict[str, Any], List[Path], List[bytes]]:
    means, sds = _parse_numbers(args.means), _parse_numbers(args.sds)
    if len(means) != len(sds):
        raise DataError(f"Got {len(means)} means but {len(sds)} standard deviations")
    data, labels = mixture.sample_mixture(means, sds, args.n, seed)
    ids = [f"p{i + 1}" for i in range(data.shape[0])]
    truth = {"means": means, "sds": sds, "n": args.n, "seed": seed, "labels": labels.tolist()}
    return truth, [write_atomic(out / "simulated_mixture.tsv", write_matrix(ids, ["x0"], data))], []


SIMULATORS = {"phylo": _simulate_phylo, "motif": _simulate_motif, "mixture": _simulate_mixture}


def cmd_simulate(args: argparse.Namespace) -> RunReport:
    """
    Generate synthetic data for one solver and write it with its ground truth.

    `args.kind` selects the generator (phylo, motif or mixture); the seed comes
    from the `em` settings so reruns reproduce the same files.
    """
    started = time.perf_counter()
    out = Path(args.out)
    seed = em_config(args).seed
    truth, outputs, inputs = SIMULATORS[args.kind](args, out, seed)
    # Ground truth goes next to the generated data
    outputs.append(write_json(out / f"simulated_{args.kind}_truth.json", truth))
    summary = [f"simulate {args.kind}: wrote {len(outputs)} files to {out}"]
    return _finish(args, f"simulate_{args.kind}", inputs, {"seed": seed, "kind": args.kind},
                   {"truth_file": f"simulated_{args.kind}_truth.json"}, None, started, outputs, summary)
