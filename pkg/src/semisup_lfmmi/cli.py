"""``semisup-lfmmi``: every pipeline stage as a subcommand over plain files.

All subcommands share one workspace directory (``--out``, default from the
``SEMISUP_LFMMI_OUT`` environment variable) with fixed file names:

    corpus/            synth output (see corpus.save_corpus)
    lm/                decode.arpa, strong.arpa
    graph/             graph.fst, phones.txt, words.txt, info.json
    models/            seed.model, seed.alignments, iter1.model, final.model
    decode/<subset>/   decodes.tsv, hyp.txt, lattices/<utt>.lat, rtf.tsv
    select/            selected.txt, rejected.tsv
    supervision/       <utt>.sup, excluded.tsv
    config.resolved    the configuration actually used
    run.log            one JSON line per invocation

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""
import argparse
import hashlib
import json
import os
import sys
from collections import Counter
from pathlib import Path

from . import am, pipeline
from .automata import SymbolTable, read_fst, read_symbols, write_fst, write_symbols
from .config import ExperimentConfig, config_hash, format_config, parse_config
from .corpus import (
    HELDOUT, SUPERVISED, UNSUPERVISED, generate_synthetic_corpus, load_corpus, save_corpus,
)
from .decoder import DecodeResult, measure_rtf, read_lattice, write_lattice
from .errors import StageError, ToolkitError, TrainingDivergenceError
from .lexicon import DecodingGraph, compile_L
from .lfmmi import read_supervision, write_supervision
from .lm import read_arpa, read_corpus, train_ngram, write_arpa
from .scoring import default_rules, load_rules, read_transcripts, score, write_transcripts

ENV_OUT = "SEMISUP_LFMMI_OUT"
DEFAULT_OUT = "semisup-out"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SUBSETS = {"supervised": SUPERVISED, "unsupervised": UNSUPERVISED, "heldout": HELDOUT}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def file_hash(path):
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(str(f.relative_to(p)).encode() + b"\0")
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class Workspace:
    def __init__(self, root, cfg):
        self.root = Path(root)
        self.cfg = cfg
        self.inputs, self.artifacts, self.timing = {}, {}, []

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def read(self, *parts):
        p = self.path(*parts)
        self.inputs[str(p.relative_to(self.root))] = file_hash(p)
        return p

    def read_external(self, path):
        p = Path(path)
        self.inputs[str(p)] = file_hash(p)
        return p

    def wrote(self, *parts, timing=False):
        p = self.path(*parts)
        rel = str(p.relative_to(self.root))
        if timing:
            self.timing.append(rel)
        else:
            self.artifacts[rel] = file_hash(p)
        return p

    def write_text(self, rel, text, timing=False):
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        return self.wrote(rel, timing=timing)

    def log(self, command, argv):
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {"command": command, "argv": argv, "config_hash": config_hash(self.cfg),
                 "seed": self.cfg.run.seed, "inputs": self.inputs, "artifacts": self.artifacts,
                 "timing": self.timing}
        with open(self.path("run.log"), "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    # shared loaders
    def corpus(self):
        d = self.path("corpus")
        if not d.is_dir():
            raise FileNotFoundError(f"{d} missing; run 'synth' first")
        self.read("corpus")
        return load_corpus(d)

    def lm(self, name):
        return read_arpa(self.read("lm", f"{name}.arpa").read_text())

    def graph(self):
        phones = read_symbols(self.read("graph", "phones.txt").read_text())
        words = read_symbols(self.read("graph", "words.txt").read_text())
        info = json.loads(self.read("graph", "info.json").read_text())
        fst = read_fst(self.read("graph", "graph.fst").read_text(), phones, words)
        return DecodingGraph(fst, tuple(tuple(s) for s in info["stages"]),
                             info["lexicon_hash"], info["lm_hash"])

    def model(self, path):
        p = self.path(path)  # absolute paths pass through unchanged
        if not p.exists():
            p = Path(path)
        return am.load_model(self.read_external(p).read_bytes())

    def run(self, **env):
        run = pipeline._Run(self.cfg, {})
        run.env = env
        return run


def _write_model(ws, rel, model):
    p = ws.path(rel)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(am.save_model(model))
    ws.wrote(rel)


def _read_alignments(text):
    out = {}
    for line in text.splitlines():
        utt, *segs = line.split()
        out[utt] = [(p, int(s), int(e)) for p, s, e in (x.split(":") for x in segs)]
    return out


def _write_alignments(alignments):
    return "".join(u + " " + " ".join(f"{p}:{s}:{e}" for p, s, e in alignments[u]) + "\n"
                   for u in sorted(alignments))


# -- subcommands --------------------------------------------------------------------------------

def cmd_synth(ws, args):
    corpus = generate_synthetic_corpus(ws.cfg.corpus, ws.cfg.run.seed)
    save_corpus(corpus, ws.path("corpus"))
    ws.wrote("corpus")
    counts = Counter(r.status for r in corpus.records)
    print(f"corpus {corpus.digest()}: " + ", ".join(f"{counts[s]} {s}" for s in SUBSETS.values()))


def cmd_train_lm(ws, args):
    if args.text:
        sentences = read_corpus(Path(args.text).read_text())
        ws.inputs[args.text] = file_hash(args.text)
        model = train_ngram(sentences, args.order or ws.cfg.decode.lm_order)
        out = Path(args.output or ws.path("lm", "custom.arpa"))
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(write_arpa(model))
        ws.artifacts[str(out)] = file_hash(out)
        print(f"wrote {out}")
        return
    dec_lm, strong_lm = pipeline.language_models(ws.corpus(), ws.cfg.decode)
    ws.write_text("lm/decode.arpa", write_arpa(dec_lm))
    ws.write_text("lm/strong.arpa", write_arpa(strong_lm))
    print(f"wrote lm/decode.arpa (order {dec_lm.order}) and lm/strong.arpa "
          f"(order {strong_lm.order})")


def cmd_compile_graph(ws, args):
    corpus = ws.corpus()
    _, graph = pipeline.decoding_graph(corpus.lexicon, ws.lm("decode"))
    ws.write_text("graph/graph.fst", graph.text)
    ws.write_text("graph/phones.txt", write_symbols(graph.fst.isymbols))
    ws.write_text("graph/words.txt", write_symbols(graph.fst.osymbols))
    ws.write_text("graph/info.json", json.dumps(
        {"stages": [list(s) for s in graph.stages], **graph.metadata()}, sort_keys=True) + "\n")
    for name, n, m in graph.stages:
        print(f"{name:<16} {n:>7} states {m:>8} arcs")


def cmd_train_seed(ws, args):
    corpus = ws.corpus()
    run = ws.run(corpus=corpus, l_fst=compile_L(corpus.lexicon,
                                                 corpus.lexicon.word_symbols(["<unk>"])),
                 den=pipeline.denominator_graph(corpus, ws.cfg.training.phone_lm_order))
    model, curve, _, alignments = run.train_seed()
    _write_model(ws, "models/seed.model", model)
    ws.write_text("models/seed.alignments", _write_alignments(alignments))
    print("objective per epoch: " + " ".join(f"{v:.4f}" for v in curve))


def cmd_decode(ws, args):
    corpus = ws.corpus()
    model = ws.model(args.model)
    run = ws.run(corpus=corpus, graph=ws.graph())
    records = corpus.subset(SUBSETS[args.subset])
    results, failures = run.decode_all(model, records)
    base = f"decode/{args.subset}"
    lat_dir = ws.path(base, "lattices")
    lat_dir.mkdir(parents=True, exist_ok=True)
    for old in lat_dir.glob("*.lat"):
        old.unlink()
    for r in results:
        (lat_dir / f"{r.utt_id}.lat").write_text(write_lattice(r.lattice))
    ws.wrote(base, "lattices")
    channel = {r.utt_id: r.channel for r in records}
    ws.write_text(f"{base}/decodes.tsv", "".join(
        f"{r.utt_id}\t{channel[r.utt_id]}\t{float(r.confidence)!r}\t{float(r.cost)!r}\t"
        f"{float(r.audio_seconds)!r}\t"
        f"{r.lattice.num_frames}\t{' '.join(r.transcript)}\n" for r in results))
    ws.write_text(f"{base}/hyp.txt", write_transcripts(
        {r.utt_id: (channel[r.utt_id], list(r.transcript)) for r in results}))
    if results:
        rtf = measure_rtf(results)
        ws.write_text(f"{base}/rtf.tsv", "".join(
            f"{u}\t{float(a)!r}\t{float(w)!r}\t{float(x)!r}\n" for u, a, w, x in rtf.per_utterance)
            + f"aggregate\t{float(rtf.total_audio)!r}\t{float(rtf.total_wall)!r}\t"
              f"{float(rtf.aggregate)!r}\n",
            timing=True)
        print(f"decoded {len(results)} ({failures} failed), RTF {rtf.aggregate:.3f}")
    else:
        print(f"decoded 0 ({failures} failed)")


def _read_decodes(ws, subset, graph_words=None, with_lattices=False):
    base = f"decode/{subset}"
    out = []
    for n, line in enumerate(ws.read(base, "decodes.tsv").read_text().splitlines(), 1):
        f = line.split("\t")
        if len(f) != 7:
            raise ToolkitError(f"decodes.tsv line {n}: expected 7 fields")
        utt, _, conf, cost, audio, frames, words = f
        lat = None
        if with_lattices:
            text = ws.path(base, "lattices", f"{utt}.lat").read_text()
            lat = read_lattice(text, graph_words, int(frames), utt)
        out.append(DecodeResult(utt, lat, tuple(words.split()), float(cost), float(conf),
                                float(audio), 0.0))
    if with_lattices:
        ws.read(base, "lattices")
    return out


def cmd_select(ws, args):
    s = ws.cfg.selection
    policy = pipeline.SelectionPolicy(s.min_confidence, s.max_perplexity, s.min_lead_silence,
                                      s.min_trail_silence)
    corpus = ws.corpus()
    decodes = _read_decodes(ws, args.subset)
    selected, rejected = pipeline.select_utterances(decodes, ws.lm("strong"), policy,
                                                    corpus.records)
    ws.write_text("select/selected.txt", "".join(f"{d.utt_id}\n" for d in selected))
    ws.write_text("select/rejected.tsv", "".join(f"{d.utt_id}\t{why}\n" for d, why in rejected))
    reasons = Counter(why for _, why in rejected)
    print(f"selected {len(selected)}/{len(decodes)}; rejected "
          + (", ".join(f"{k} {reasons[k]}" for k in pipeline.REJECT_REASONS if reasons[k])
             or "none"))


def cmd_build_supervision(ws, args):
    cfg = ws.cfg
    if args.mode:
        cfg = ws.cfg = cfg.replace(**{"supervision.mode": args.mode})
    corpus = ws.corpus()
    words = read_symbols(ws.read("graph", "words.txt").read_text())
    wanted = set(ws.read("select", "selected.txt").read_text().split())
    decodes = [d for d in _read_decodes(ws, args.subset, words, with_lattices=True)
               if d.utt_id in wanted]
    run = ws.run(corpus=corpus, strong_lm=ws.lm("strong"), dec_lm=ws.lm("decode"))
    sups, excluded = run.supervise(decodes)
    d = ws.path("supervision")
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("*.sup"):
        old.unlink()
    for u, sup in sups.items():
        (d / f"{u}.sup").write_text(write_supervision(sup))
    ws.write_text("supervision/excluded.tsv",
                  "".join(f"{k}\t{n}\n" for k, n in sorted(excluded.items())))
    ws.wrote("supervision")
    print(f"{len(sups)} supervisions ({cfg.supervision.mode}); excluded {sum(excluded.values())}")


def cmd_train_lfmmi(ws, args):
    corpus = ws.corpus()
    model = ws.model(args.model)
    run = ws.run(corpus=corpus)
    alignments = _read_alignments(ws.read("models", "seed.alignments").read_text())
    examples = run.supervised_examples(model, alignments)
    sup_dir = ws.path("supervision")
    sups = {}
    if sup_dir.is_dir():
        ws.read("supervision")
        for p in sorted(sup_dir.glob("*.sup")):
            sups[p.stem] = read_supervision(p.read_text(), corpus.phones)
    examples += run.examples(sups, {u: run.inputs(model, u) for u in sups})
    den = pipeline.denominator_graph(corpus, ws.cfg.training.phone_lm_order)
    model, curve = pipeline.train_lfmmi(model, examples, den, ws.cfg.training,
                                        ws.cfg.training.epochs, ws.cfg.run.seed + 1000)
    _write_model(ws, args.output, model)
    print(f"trained on {len(examples)} utterances; objective per epoch: "
          + " ".join(f"{v:.4f}" for v in curve))


def cmd_score(ws, args):
    refs = read_transcripts(ws.read_external(args.ref).read_text())
    hyps = read_transcripts(ws.read_external(args.hyp).read_text())
    rules = load_rules(ws.read_external(args.rules).read_text()) if args.rules else default_rules()
    report = score(refs, hyps, rules)
    print(report.format(), end="")


def cmd_run_experiment(ws, args):
    try:
        report = pipeline.run_experiment(ws.cfg)
    except StageError as e:
        rep = getattr(e, "report", None)
        if rep is not None:
            ws.write_text("report.txt", rep.format(), timing=True)
            ws.write_text("report.jsonl", rep.records(timing=False))
        raise
    ws.write_text("report.txt", report.format(), timing=True)
    ws.write_text("report.jsonl", report.records(timing=False))
    _write_model(ws, "models/final.model", report.model)
    print(report.format(), end="")


def cmd_inspect_fst(ws, args):
    text = ws.read_external(args.fst).read_text()
    isyms = read_symbols(Path(args.isymbols).read_text()) if args.isymbols else None
    osyms = read_symbols(Path(args.osymbols).read_text()) if args.osymbols else isyms
    if isyms is None:
        labels = [int(f) for line in text.splitlines() if len(line.split()) in (4, 5)
                  for f in line.split()[2:4]]
        isyms = osyms = SymbolTable([str(i) for i in range(1, max(labels, default=0) + 1)])
    fst = read_fst(text, isyms, osyms)
    sys.stdout.write(write_fst(fst))
    print(f"{fst.num_states} states, {fst.num_arcs} arcs, {len(fst.finals)} final",
          file=sys.stderr)


# -- entry point --------------------------------------------------------------------------------

COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus"),
    "train-lm": (cmd_train_lm, "train the decoding and strong n-gram LMs"),
    "compile-graph": (cmd_compile_graph, "compile the decoding graph"),
    "train-seed": (cmd_train_seed, "train the seed model on the supervised subset"),
    "decode": (cmd_decode, "decode a subset into lattices"),
    "select": (cmd_select, "select confident decodes"),
    "build-supervision": (cmd_build_supervision, "build numerator supervision"),
    "train-lfmmi": (cmd_train_lfmmi, "retrain with supervised plus selected data"),
    "score": (cmd_score, "score hypotheses against references"),
    "run-experiment": (cmd_run_experiment, "run every stage and write the report"),
    "inspect-fst": (cmd_inspect_fst, "parse a machine and print it back"),
}


def build_parser():
    parser = _Parser(prog="semisup-lfmmi", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="key = value config file with [section] headers")
    parser.add_argument("--seed", type=int, help="overrides run.seed")
    parser.add_argument("--out", help=f"workspace directory (default ${ENV_OUT} or {DEFAULT_OUT})")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    parsers = {name: sub.add_parser(name, help=text) for name, (_, text) in COMMANDS.items()}
    p = parsers["train-lm"]
    p.add_argument("--text", help="train one LM on this text instead (one sentence per line)")
    p.add_argument("--order", type=int)
    p.add_argument("--output")
    for name in ("decode", "select", "build-supervision"):
        parsers[name].add_argument("--subset", choices=sorted(SUBSETS),
                                   default="unsupervised")
    parsers["decode"].add_argument("--model", default="models/seed.model")
    parsers["build-supervision"].add_argument("--mode", choices=["1best", "full-lattice"])
    parsers["train-lfmmi"].add_argument("--model", default="models/seed.model")
    parsers["train-lfmmi"].add_argument("--output", default="models/iter1.model")
    p = parsers["score"]
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--rules")
    p = parsers["inspect-fst"]
    p.add_argument("fst")
    p.add_argument("--isymbols")
    p.add_argument("--osymbols")
    return parser


def _load_config(args):
    cfg = parse_config(Path(args.config).read_text()) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(**{"run.seed": args.seed})
    return cfg


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    ws = None
    try:
        cfg = _load_config(args)
        ws = Workspace(args.out or os.environ.get(ENV_OUT) or DEFAULT_OUT, cfg)
        ws.write_text("config.resolved", format_config(cfg))
        COMMANDS[args.command][0](ws, args)
        status = EXIT_OK
    except (TrainingDivergenceError, StageError) as e:
        cause = e.cause if isinstance(e, StageError) else e
        print(f"error: {e}", file=sys.stderr)
        status = EXIT_DIVERGED if isinstance(cause, TrainingDivergenceError) else EXIT_DATA
    except (ToolkitError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        status = EXIT_DATA
    if ws is not None:
        ws.log(args.command, argv)
    return status


if __name__ == "__main__":
    sys.exit(main())
