"""Command-line entry point: ``stepcrs <command> [options]``.

Every TrainConfig field can be set as ``--section.field value``; precedence is
defaults < ``--config FILE`` < flags.  Exit codes: 0 success, 2 configuration
error, 3 data validation error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from .dialogue_corpus import CorpusError, DialogueSample, Turn, generate_synthetic_corpus, write_jsonl
from .knowledge_graph import KGFormatError, generate_synthetic_kg, save_kg
from .numerics import NumericalError
from .pipeline.checkpoint import CheckpointError, load_arrays
from .pipeline.config import ConfigError, TrainConfig, load_config, set_path
from .pipeline.experiments import ablation_csv, hyperparam_sweep, run_ablation_suite, sweep_csv
from .pipeline.training import evaluate, load_dataset, load_model, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("stepcrs")


def _echo(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2), flush=True)


def _parse_overrides(extra: list[str]) -> dict:
    """``--a.b value`` or ``--a.b=value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
        out[key] = value
    return out


def _resolve_config(args, extra: list[str]) -> TrainConfig:
    overrides = _parse_overrides(extra)
    for flag, key in (("no_curriculum", "ablation.no_curriculum"), ("no_task1", "ablation.no_task1"),
                      ("no_task2", "ablation.no_task2"), ("no_task3", "ablation.no_task3"),
                      ("joint", "optim.joint")):
        if getattr(args, flag, False):
            overrides[key] = True
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None):
        overrides["data.dir"] = args.data
    return load_config(getattr(args, "config", None), overrides)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    if args.entities < 20:
        raise ConfigError("--entities must be >= 20")
    params = {"entities": args.entities, "relations": args.relations, "items": args.items,
              "dialogues": args.dialogues, "p_signal": args.p_signal, "seed": args.seed, "out": args.out}
    _echo(params)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    g = generate_synthetic_kg(args.entities, args.relations, args.items, seed=args.seed)
    corpus = generate_synthetic_corpus(g, args.dialogues, seed=args.seed, p_signal=args.p_signal)
    save_kg(g, out / "kg.tsv", out / "items.txt")
    for split in ("train", "valid", "test"):
        write_jsonl(getattr(corpus, split), out / f"corpus.{split}.jsonl")
    dialogues = corpus.all
    stats = {"conversations": len(dialogues), "utterances": sum(len(d.turns) for d in dialogues),
             "entities": g.num_entities, "items": len(g.item_ids), "relations": g.num_relations,
             "triples": g.num_triples,
             "splits": {s: len(getattr(corpus, s)) for s in ("train", "valid", "test")}}
    _echo(stats)
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    _echo(cfg.to_dict())
    data = load_dataset(cfg)
    trainer, report = train(cfg, data)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    trainer.save(prefix)
    report.write(str(prefix) + ".report.json")
    Path(str(prefix) + ".curves.csv").write_text(report.curves_csv(), encoding="utf-8")
    _echo({"checkpoint": str(prefix), "recall": report.recall, "distinct": report.distinct})
    return EXIT_OK


def cmd_eval(args, extra) -> int:
    _, meta = load_arrays(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    for k, v in _parse_overrides(extra).items():
        if not k.startswith("eval."):
            raise ConfigError(f"eval only accepts eval.* overrides, got {k!r}")
        set_path(cfg, k, v)
    if args.data:
        cfg.data.dir = args.data
    cfg.validate()
    _echo(cfg.to_dict())
    data = load_dataset(cfg)
    model = load_model(args.checkpoint, data.kg)
    model.cfg.eval = cfg.eval
    ev = evaluate(model, data.test)
    result = {"seed": cfg.seed, "config": cfg.to_dict(), "recall": ev.recall, "distinct": ev.distinct,
              "n_eval_turns": ev.n_eval_turns, "rankings": ev.rankings, "responses": ev.responses}
    out = Path(args.report or str(args.checkpoint) + ".eval.json")
    out.write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    _echo({"report": str(out), "recall": ev.recall, "distinct": ev.distinct})
    return EXIT_OK


def cmd_ablate(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    _echo(cfg.to_dict())
    rows = run_ablation_suite(cfg, load_dataset(cfg), _seeds(args.seeds))
    text = ablation_csv(rows)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    cfg = _resolve_config(args, extra)
    _echo(cfg.to_dict())
    rows = hyperparam_sweep(cfg, load_dataset(cfg), args.axis, _seeds(args.values), _seeds(args.seeds))
    text = sweep_csv(rows, args.axis)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_grad_check(args, extra) -> int:
    from .gradcheck import TOLERANCE, run_suite
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    _echo({"seed": args.seed, "tolerance": TOLERANCE, "dtype": "float64"})
    ok = True
    for r in run_suite(args.seed):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:16s} {status:4s} max_rel_error={r.report.max_rel_error:.3e} "
              f"coords={r.report.n_checked}")
        ok &= r.passed
    return EXIT_OK if ok else 1


def link_entities(text: str, names: list[str]) -> list[int]:
    """Exact, case-insensitive, word-bounded matches of KG entity names."""
    low = text.lower()
    found = []
    for i, name in enumerate(names):
        if re.search(r"(?<!\w)" + re.escape(name.lower()) + r"(?!\w)", low):
            found.append(i)
    return found


def cmd_chat(args, extra, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    _, meta = load_arrays(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    if args.data:
        cfg.data.dir = args.data
    _echo(cfg.to_dict())
    data = load_dataset(cfg)
    model = load_model(args.checkpoint, data.kg)
    names = data.kg.entity_names
    items = set(int(i) for i in data.kg.item_ids)
    history: list[Turn] = []
    stdout.write("Can I help you find a good movie? (type :quit to exit)\n")
    for n, line in enumerate(iter(stdin.readline, "")):
        text = line.strip()
        if text == ":quit":
            break
        if not text:
            stdout.write("please type something, or :quit\n")
            continue
        linked = link_entities(text, names)
        history.append(Turn("user", text, [e for e in linked if e in items], linked))
        sample = DialogueSample(f"chat:{n}", list(history), Turn("recommender", ""), [])
        ranked, texts, _, _ = model.recommend_and_respond([sample], "generated", k=3)
        top = [names[i] for i in ranked[0]]
        stdout.write(f"linked: {linked}\n")
        stdout.write(f"items: {', '.join(top)}\n")
        stdout.write(f"system: {texts[0]}\n")
        said = [i for i in ranked[0] if names[i] in texts[0]]
        history.append(Turn("recommender", texts[0] or ".", said, said))
        stdout.flush()
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="dataset directory (overrides data.dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-curriculum", action="store_true", help="all stage weights fixed at 1")
    p.add_argument("--no-task1", action="store_true")
    p.add_argument("--no-task2", action="store_true")
    p.add_argument("--no-task3", action="store_true")
    p.add_argument("--joint", action="store_true", help="train both objectives in one phase")


def _sub(sub, name: str, **kw) -> argparse.ArgumentParser:
    return sub.add_parser(name, allow_abbrev=False, **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stepcrs", description=__doc__.splitlines()[0], allow_abbrev=False)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = _sub(sub, "gen-data", help="write a synthetic KG and dialogue corpus")
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=4)
    p.add_argument("--items", type=int, default=64)
    p.add_argument("--dialogues", type=int, default=500)
    p.add_argument("--p-signal", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = _sub(sub, "train", help="train and evaluate; writes checkpoint, report and curves")
    _train_flags(p)
    p.add_argument("--out", default="runs/model", help="checkpoint prefix")
    p.set_defaults(func=cmd_train)

    p = _sub(sub, "eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = _sub(sub, "ablate", help="full model and four ablations over paired seeds")
    _train_flags(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)

    p = _sub(sub, "sweep", help="one-axis sweep over prefix or query length")
    _train_flags(p)
    p.add_argument("--axis", required=True, choices=("prefix_length", "query_length"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = _sub(sub, "grad-check", help="finite-difference check of every loss and block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = _sub(sub, "chat", help="offline demo REPL over a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_chat)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, KGFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
