# coding: utf-8

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from .bench import run_benchmark, sweep_k, write_bench_csv, write_bench_json, write_histogram_csv, write_sweep_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config_handling import RunConfig, VerificationMode
from .corpus import mask_preview, read_corpus, read_prompts, write_corpus, write_loss_csv, write_prompts
from .decoder import ar_generate, placeholder_token, space_generate, write_trace_jsonl
from .exceptions import SpaceException, SpaceInvalidConfig
from .layout import build_layout, literal_mask_divergence, render_mask_grid
from .loggers import handle_logging, logger
from .model import ModelParams, init_model
from .oracle import equivalence_report, write_equivalence_csv, write_equivalence_json
from .sarsft import CORPUS_KINDS, synth_corpus, train

################################################################################
# Main entrypoint
################################################################################

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2
EXIT_INTERRUPTED = 3


class _Parser(argparse.ArgumentParser):
    """
    Usage errors exit with 1 like every other input problem.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, default=None, help="number of mask tokens / candidates per step")
    parser.add_argument("--sampling", choices=["greedy", "stochastic"], default=None, help="sampling mode")
    parser.add_argument("--verification", choices=[m.label for m in VerificationMode], default=None,
                        help="candidate verification mode")
    parser.add_argument("--temperature", type=float, default=None, help="sampling temperature")
    parser.add_argument("--top-p", type=float, default=None, help="nucleus truncation (1 disables)")
    parser.add_argument("--top-k", type=int, default=None, help="top-k truncation (0 disables)")
    parser.add_argument("--max-new-tokens", type=int, default=None, help="generation budget")
    parser.add_argument("--seed", type=int, default=None, help="random seed")


def handle_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Setup the main program options.

    :return: parsed arguments
    """
    parser = _Parser(prog="spacedecode", description="SAR-SFT training and auto-correct decoding on a toy transformer")

    # Controls config file (json)
    parser.add_argument("--config", default=None, help="location of the JSON config file")
    # Controls log file location+name
    parser.add_argument("--log-file", default=None, help="file location for log output")
    parser.add_argument("--workers", type=int, default=1, help="worker threads for sampling and benchmarking")
    parser.add_argument("--debug", action="store_true", help="enabled debug level logging")

    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    p = commands.add_parser("train", help="SAR-SFT training on a corpus file")
    p.add_argument("--corpus", default=None, help="corpus JSONL file")
    p.add_argument("--out", default=None, help="checkpoint to write (per-epoch checkpoints go next to it)")
    p.add_argument("--init-from", default=None, help="start from this checkpoint instead of a fresh model")
    p.add_argument("--loss-csv", default=None, help="loss curve CSV (default: <out>.loss.csv)")
    p.add_argument("--k", type=int, default=None, help="mask tokens per masked sample")
    p.add_argument("--p-ar", type=float, default=None, help="probability of keeping a sample AR (1 = plain SFT)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None, help="peak learning rate")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = commands.add_parser("generate", help="generate from a prompt")
    p.add_argument("--model", default=None, help="checkpoint file")
    p.add_argument("--prompt-tokens", required=True, help="prompt token ids, e.g. '3,1,4'")
    p.add_argument("--mode", choices=["ar", "space"], default="space")
    p.add_argument("--trace", default=None, help="write the per-step trace as JSONL (space mode)")
    _add_decode_flags(p)

    p = commands.add_parser("oracle-check", help="statistical equivalence of SPACE and AR sampling")
    p.add_argument("--model", default=None, help="checkpoint file (default: a random model from the config)")
    p.add_argument("--prompt-tokens", default="0,1,2", help="prompt token ids")
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--samples", type=int, default=200000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verification", choices=["lossless-residual", "paper-literal"], default="lossless-residual",
                   help="paper-literal only reports (always exit 0)")
    p.add_argument("--report", default=None, help="JSON report file")
    p.add_argument("--csv", default=None, help="per-sequence CSV file")

    p = commands.add_parser("bench", help="AR baseline against SPACE on a prompts file")
    p.add_argument("--model", default=None, help="checkpoint file")
    p.add_argument("--prompts-file", required=True, help="prompts JSONL file")
    p.add_argument("--out", default=None, help="benchmark CSV (default: <report_dir>/bench.csv)")
    _add_decode_flags(p)

    p = commands.add_parser("sweep", help="benchmark over several k, one model per k")
    p.add_argument("--k-list", required=True, help="k values, e.g. '1,2,3,5'")
    p.add_argument("--prompts-file", required=True, help="prompts JSONL file")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", default=None, help="train one model per k on this corpus")
    source.add_argument("--model-pattern", default=None, help="checkpoint path with '{k}', e.g. 'model_k{k}.spc'")
    p.add_argument("--out", default=None, help="sweep CSV (default: <report_dir>/sweep.csv)")
    _add_decode_flags(p)

    p = commands.add_parser("prep-data", help="write a synthetic corpus")
    p.add_argument("--kind", choices=CORPUS_KINDS, required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--answer-len", type=int, default=16)
    p.add_argument("--out", default=None, help="corpus JSONL file")
    p.add_argument("--prompts-out", default=None, help="also write the sample prompts as a prompts file")

    p = commands.add_parser("mask-preview", help="show corpus samples after SAR masking")
    p.add_argument("--corpus", default=None, help="corpus JSONL file")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--p-ar", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=5, help="number of samples to show")

    p = commands.add_parser("layout", help="render the attention mask of one decoding layout")
    p.add_argument("--prompt-tokens", required=True)
    p.add_argument("--candidates", default=None, help="candidate token ids (default: k placeholders)")
    p.add_argument("--k", type=int, default=2)

    return parser.parse_args(argv)


def parse_tokens(text: str, what: str = "token list") -> List[int]:
    """
    Parse "3,1,4" or "3 1 4" into token ids.
    """
    try:
        tokens = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise SpaceInvalidConfig(f"{what} must be integers, got '{text}'")
    return tokens


def _load_model(path: Optional[str], config: RunConfig) -> ModelParams:
    path = path or config.paths.checkpoint
    logger.debug(f"loading model from '{path}'")
    return load_checkpoint(path)


def _decode_overrides(args: argparse.Namespace, config: RunConfig) -> None:
    config.apply_overrides("decode", k=args.k, sampling=args.sampling, verification=args.verification,
                           temperature=args.temperature, top_p=args.top_p, top_k=args.top_k,
                           max_new_tokens=args.max_new_tokens, seed=args.seed)


def _report_path(out: Optional[str], config: RunConfig, default_name: str) -> str:
    return out or os.path.join(config.paths.report_dir, default_name)


def _sibling(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


################################################################################
# Commands
################################################################################

def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    config.apply_overrides("sarsft", k=args.k, p_ar=args.p_ar, epochs=args.epochs, learning_rate=args.lr,
                           batch_size=args.batch_size, seed=args.seed)
    config.apply_overrides("paths", corpus=args.corpus, checkpoint=args.out)
    corpus = read_corpus(config.paths.corpus, config.model.mask_token_id)
    params = load_checkpoint(args.init_from) if args.init_from else init_model(config.model)

    trained, curve = train(params, corpus, config.sarsft, checkpoint_base=config.paths.checkpoint)
    save_checkpoint(config.paths.checkpoint, trained)
    write_loss_csv(args.loss_csv or _sibling(config.paths.checkpoint, ".loss.csv"), curve)
    label = "SFT" if config.sarsft.is_plain_sft else "SAR-SFT"
    print(f"{label} final loss {curve.final:.6f} (initial {curve.initial:.6f}) -> {config.paths.checkpoint}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    _decode_overrides(args, config)
    params = _load_model(args.model, config)
    prompt = parse_tokens(args.prompt_tokens, "--prompt-tokens")
    if params.config.mask_token_id in prompt:
        raise SpaceInvalidConfig(f"prompt contains the mask token {params.config.mask_token_id}")

    if args.mode == "ar":
        tokens, invocations = ar_generate(params, prompt, config.decode)
        print(" ".join(str(t) for t in tokens))
        print(f"invocations: {invocations}")
        return EXIT_OK

    tokens, trace = space_generate(params, prompt, config.decode)
    print(" ".join(str(t) for t in tokens))
    print(f"invocations: {trace.invocations}, avg accepted tokens: {trace.avg_accepted_tokens:.3f} "
          f"(k={trace.k})")
    if args.trace:
        write_trace_jsonl(trace, args.trace)
    return EXIT_OK


def cmd_oracle_check(args: argparse.Namespace, config: RunConfig) -> int:
    params = _load_model(args.model, config) if args.model else init_model(config.model)
    prompt = parse_tokens(args.prompt_tokens, "--prompt-tokens")
    literal_only = args.verification == "paper-literal"

    report = equivalence_report(params, prompt, args.horizon, args.k, args.samples, args.seed,
                                include_literal=True, workers=args.workers)
    print(report.summary())
    if args.report:
        write_equivalence_json(args.report, report)
    if args.csv:
        write_equivalence_csv(args.csv, report)
    if literal_only or report.passed:
        return EXIT_OK
    return EXIT_CHECK_FAILED


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    _decode_overrides(args, config)
    params = _load_model(args.model, config)
    prompts = read_prompts(args.prompts_file)
    report = run_benchmark(params, prompts, config.decode, workers=args.workers)

    out = _report_path(args.out, config, "bench.csv")
    write_bench_csv(out, report)
    write_histogram_csv(_sibling(out, ".hist.csv"), [report])
    write_bench_json(_sibling(out, ".json"), [report])
    print(report.summary_line())
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    _decode_overrides(args, config)
    k_values = parse_tokens(args.k_list, "--k-list")
    if not k_values or min(k_values) < 1:
        raise SpaceInvalidConfig("--k-list needs positive k values")
    prompts = read_prompts(args.prompts_file)
    out = _report_path(args.out, config, "sweep.csv")

    models: Dict[int, ModelParams] = {}
    if args.model_pattern:
        for k in k_values:
            models[k] = load_checkpoint(args.model_pattern.format(k=k))
    else:
        corpus = read_corpus(args.corpus, config.model.mask_token_id)
        base = init_model(config.model)
        for k in k_values:
            models[k], curve = train(base, corpus, replace(config.sarsft, k=k).validate())
            save_checkpoint(_sibling(out, f".model_k{k}.spc"), models[k])
            logger.info(f"k={k}: final training loss {curve.final:.6f}")

    table = sweep_k(models, prompts, k_values, config.decode, workers=args.workers)
    write_sweep_csv(out, table)
    write_histogram_csv(_sibling(out, ".hist.csv"), table.reports)
    write_bench_json(_sibling(out, ".json"), table.reports)
    for report in table.reports:
        print(report.summary_line())
    return EXIT_OK


def cmd_prep_data(args: argparse.Namespace, config: RunConfig) -> int:
    samples = synth_corpus(args.kind, args.size, args.seed, config.model, answer_len=args.answer_len)
    out = args.out or config.paths.corpus
    write_corpus(out, samples)
    if args.prompts_out:
        write_prompts(args.prompts_out, [s.prompt for s in samples])
    print(f"wrote {len(samples)} {args.kind} samples to {out}")
    return EXIT_OK


def cmd_mask_preview(args: argparse.Namespace, config: RunConfig) -> int:
    config.apply_overrides("sarsft", k=args.k, p_ar=args.p_ar, seed=args.seed)
    corpus = read_corpus(args.corpus or config.paths.corpus, config.model.mask_token_id)
    print(mask_preview(corpus, config.sarsft.k, config.sarsft.p_ar, config.sarsft.seed,
                       config.model.mask_token_id, n=args.n))
    return EXIT_OK


def cmd_layout(args: argparse.Namespace, config: RunConfig) -> int:
    prompt = parse_tokens(args.prompt_tokens, "--prompt-tokens")
    if args.candidates:
        candidates = parse_tokens(args.candidates, "--candidates")
    else:
        candidates = [placeholder_token(config.model)] * args.k
    layout = build_layout(prompt, candidates, args.k, config.model.mask_token_id)
    print(render_mask_grid(layout))
    diverging = literal_mask_divergence(layout)
    print(f"length {len(layout)}, cells where the distance rule differs from group membership: {len(diverging)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "oracle-check": cmd_oracle_check,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "prep-data": cmd_prep_data,
    "mask-preview": cmd_mask_preview,
    "layout": cmd_layout,
}


def run(argv: Optional[Sequence[str]] = None) -> None:
    """
    Main execution function.  Script will exit with a non-zero value based on the following:
        1: Usage, configuration, I/O or processing problem
        2: A check failed (oracle-check FAIL)
        3: User interrupt
    """
    args = handle_arguments(argv)

    # check for extended logging
    if args.debug:
        logger.setLevel(logging.DEBUG)

    # Verify the configuration file
    try:
        config = RunConfig(args.config)
        if args.log_file:
            handle_logging(args.log_file, "DEBUG" if args.debug else "VERBOSE")
    except Exception as err:
        logger.error(f"Unable to continue due to a configuration problem: {err}")
        sys.exit(EXIT_ERROR)

    exit_rc = EXIT_OK
    try:
        exit_rc = COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        logger.info("\n\n##### Interrupted by user!\n")
        exit_rc = EXIT_INTERRUPTED
    except (SpaceException, OSError) as err:
        logger.error(f"{args.command} failed: {err}")
        exit_rc = EXIT_ERROR
    sys.exit(exit_rc)


if __name__ == "__main__":
    run()
