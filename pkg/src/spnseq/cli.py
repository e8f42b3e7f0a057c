"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import chain, checkpoint, data, memm, training, verify
from .errors import InputError, NumericError, SpnSeqError, StructureError
from .spn import Semiring

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("spnseq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
MODEL_KINDS = ("spn-memm", "spn-crf", "spn-ho-crf")


class ConfigError(InputError):
    pass


@dataclass
class RunConfig:
    model: str = "spn-crf"
    layers: int = 1
    children: int = 2
    states: int = 2
    order: int = 1
    beam_width: int = 20
    window: int = 1
    factors: str = ""
    ngrams: str = ""
    sparse_ngrams: bool | None = None
    semiring: str = "sum"
    lr: float = 1e-2
    l2: float = 1e-4
    epochs: int = 50
    eval_every: int = 1
    seed: int = 0
    jobs: int = 1
    format: str = "jsonl"
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    fold: int = 0

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"--model must be one of {', '.join(MODEL_KINDS)}")
        for name in ("layers", "children", "states", "order", "beam_width", "window",
                     "epochs", "eval_every", "jobs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"--{name.replace('_', '-')} must be >= 1")
        if self.semiring not in ("sum", "max"):
            raise ConfigError("--semiring must be 'sum' or 'max'")
        if self.model == "spn-memm" and self.semiring == "max":
            raise ConfigError("the MEMM needs label posteriors; use --semiring sum")
        if not self.lr > 0 or self.l2 < 0:
            raise ConfigError("--lr must be > 0 and --l2 >= 0")
        if self.format not in ("jsonl", "ocr"):
            raise ConfigError("--format must be 'jsonl' or 'ocr'")
        self.factor_list()
        self.ngram_orders()

    def factor_list(self) -> list[tuple[int, int]]:
        spec = self.factors or ("1:1,2:2" if self.model == "spn-ho-crf" else f"{self.window}:1")
        out = []
        for item in spec.split(","):
            try:
                m, n = (int(v) for v in item.split(":"))
            except ValueError:
                raise ConfigError(f"bad factor spec {item!r}; expected m:n") from None
            if m < 1 or not 1 <= n <= chain.MAX_NGRAM_ORDER:
                raise ConfigError(f"factor {item!r}: need m >= 1 and 1 <= n <= 3")
            out.append((m, n))
        return out

    def ngram_orders(self) -> list[int]:
        spec = self.ngrams or ("1,2,3" if self.model == "spn-ho-crf" else "2")
        try:
            orders = sorted({int(v) for v in spec.split(",")})
        except ValueError:
            raise ConfigError(f"bad n-gram order list {spec!r}") from None
        if any(not 1 <= o <= chain.MAX_NGRAM_ORDER for o in orders):
            raise ConfigError("n-gram orders must be in 1..3")
        return orders

    @property
    def sparse(self) -> bool:
        if self.sparse_ngrams is None:
            return self.model == "spn-ho-crf"
        return bool(self.sparse_ngrams)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(self.lr, self.l2, int(self.epochs), 1, int(self.seed),
                                    int(self.eval_every))


def _flatten(doc: dict) -> dict:
    out = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            out.update(_flatten(value))
        else:
            out[key.replace("-", "_")] = value
    return out


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                doc = _flatten(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in doc.items():
            setattr(cfg, key, value)
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _add_model_flags(p):
    p.add_argument("--config", help="TOML file; flags override its values")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--layers", type=int)
    p.add_argument("--children", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--order", type=int, help="MEMM order M")
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--factors", help='local factors as "m:n,..."')
    p.add_argument("--ngrams", help='n-gram transition orders, e.g. "1,2,3"')
    p.add_argument("--sparse-ngrams", dest="sparse_ngrams", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--semiring", choices=("sum", "max"))
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)
    _add_data_flags(p)


def _add_data_flags(p):
    p.add_argument("--format", choices=("jsonl", "ocr"))
    p.add_argument("--train", help="training data (OCR: the full letter file)")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--fold", type=int, help="OCR test fold; the next fold is the dev set")
    p.add_argument("--jobs", type=int)


def load_splits(cfg: RunConfig):
    """``(train, dev, test)``; dev and test may be ``None``."""
    if cfg.train is None:
        raise ConfigError("--train is required")
    if cfg.format == "ocr":
        full = data.load_ocr(cfg.train)
        k = full.folds.num_folds
        if not 0 <= cfg.fold < k:
            raise ConfigError(f"--fold must be in [0, {k})")
        return full.split_fold(cfg.fold, (cfg.fold + 1) % k)
    train = data.load_jsonl(cfg.train)
    dev = data.load_jsonl(cfg.dev, train.num_labels) if cfg.dev else None
    test = data.load_jsonl(cfg.test, train.num_labels) if cfg.test else None
    return train, dev, test


def build_model(cfg: RunConfig, train: data.Dataset, rng: np.random.Generator):
    Y, D = train.num_labels, train.feature_dim
    topo = dict(num_layers=cfg.layers, children_per_parent=cfg.children,
                states_per_hidden=cfg.states)
    semiring = Semiring(cfg.semiring)
    if cfg.model == "spn-memm":
        return memm.MemmModel.create(cfg.order, Y, D, topo, window=cfg.window, rng=rng,
                                     beam_width=cfg.beam_width, semiring=semiring)
    labels = [s.labels for s in train.sequences]
    ngrams = [chain.NGramDictionary.from_sequences(o, Y, labels, include_unseen=not cfg.sparse)
              for o in cfg.ngram_orders()]
    factors = [chain.make_factor(Y, D, m, n, topo, rng, semiring) for m, n in cfg.factor_list()]
    return chain.ChainModel(Y, D, ngrams, [np.zeros(len(d)) for d in ngrams], factors)


def _predict_all(model, dataset, jobs):
    obs = [s.observations for s in dataset.sequences]
    if jobs <= 1:
        return [model.predict(o) for o in obs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(model.predict, obs))


def error_report(model, dataset, jobs=1) -> dict:
    preds = _predict_all(model, dataset, jobs)
    per_seq = []
    for i, (p, s) in enumerate(zip(preds, dataset.sequences)):
        per_seq.append({"index": i, "length": len(s), "errors": int(np.sum(p != s.labels))})
    return {"error_rate": data.error_rate(preds, [s.labels for s in dataset.sequences]),
            "num_labels": dataset.num_positions, "sequences": per_seq}


def cmd_train(args) -> int:
    cfg = build_config(args)
    train, dev, test = load_splits(cfg)
    train, others, stats = data.normalize(train, [d for d in (dev, test) if d is not None])
    it = iter(others)
    dev = next(it) if dev is not None else None
    test = next(it) if test is not None else None
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, train, rng)
    log.info("%s with %d parameters", cfg.model, model.num_parameters)
    report, best = training.train(model, train, dev, cfg.train_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.json", best, stats, train.label_alphabet,
                    {"config": asdict(cfg)})
    result = asdict(report)
    if test is not None:
        result["test_error"] = error_report(best, test, cfg.jobs)["error_rate"]
        print(f"test error {result['test_error']:.4f}")
    with open(out / "report.json", "w") as fh:
        json.dump(result, fh, indent=2)
    print(f"wrote {out / 'model.json'} and {out / 'report.json'}")
    return EXIT_OK


def _load_eval_data(args, cfg_for_format):
    fmt = args.format or "jsonl"
    if fmt == "ocr":
        full = data.load_ocr(args.data)
        fold = args.fold if args.fold is not None else 0
        return full.subset(full.folds.indices(fold))
    return data.load_jsonl(args.data, cfg_for_format)


def _restore(args):
    model, stats, alphabet, _ = checkpoint.load(args.checkpoint)
    ds = _load_eval_data(args, model.num_labels)
    if stats is not None:
        ds = data.apply_normalization(ds, stats)
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _restore(args)
    report = error_report(model, ds, args.jobs or 1)
    print(f"error rate {report['error_rate']:.4f} over {report['num_labels']} labels")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, ds = _restore(args)
    preds = _predict_all(model, ds, args.jobs or 1)
    lines = [" ".join(str(int(v)) for v in p) for p in preds]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line)
    if args.marginals:
        if not isinstance(model, chain.ChainModel):
            raise ConfigError("--marginals needs a chain model")
        with open(args.marginals, "w") as fh:
            for i, s in enumerate(ds.sequences):
                marg = chain.posterior_marginals(model, s.observations)
                fh.write(json.dumps({"index": i, "states": marg.states.tolist(),
                                     "labels": marg.labels.tolist()}) + "\n")
    return EXIT_OK


def _floats(spec, name):
    try:
        return [float(v) for v in spec.split(",")]
    except ValueError:
        raise ConfigError(f"bad {name} list {spec!r}") from None


def cmd_grid_search(args) -> int:
    cfg = build_config(args)
    train, dev, _ = load_splits(cfg)
    if dev is None:
        raise ConfigError("grid search needs a dev set (--dev, or --format ocr)")
    train, (dev,), _ = data.normalize(train, [dev])

    def factory():
        return build_model(cfg, train, np.random.default_rng(cfg.seed))

    best, results = training.grid_search(factory, train, dev, cfg.train_config(),
                                         _floats(args.lr_grid, "--lr-grid"),
                                         _floats(args.l2_grid, "--l2-grid"))
    doc = {"best": {"lr": best[0], "l2": best[1]},
           "results": [{"lr": a, "l2": b, "dev_error": e} for a, b, e in results]}
    print(json.dumps(doc["best"]))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(doc, fh, indent=2)
    return EXIT_OK


def cmd_verify(args) -> int:
    scopes = list(verify.SUITES) if args.scope == "all" else args.scope.split(",")
    unknown = [s for s in scopes if s not in verify.SUITES]
    if unknown:
        raise ConfigError(f"unknown scope {unknown[0]!r}; choose from {', '.join(verify.SUITES)}")
    ok = True
    for name in scopes:
        suite = verify.SUITES[name]
        kwargs = {"inject_fault": True} if args.inject_fault else {}
        result = suite(**kwargs)
        print(result.line())
        ok &= result.passed
    return EXIT_OK if ok else EXIT_VERIFY


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spnseq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint and report")
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="pick learning rate and l2 on the dev set")
    _add_model_flags(p)
    p.add_argument("--lr-grid", default="1e-2,1e-3,1e-4")
    p.add_argument("--l2-grid", default="1e-2,1e-3,1e-4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid_search)

    for name, func, helptext in (("eval", cmd_eval, "label error rate of a checkpoint"),
                                 ("predict", cmd_predict, "write predicted label sequences")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--format", choices=("jsonl", "ocr"))
        p.add_argument("--fold", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out")
        if name == "predict":
            p.add_argument("--marginals", help="JSON-lines file for chain posterior marginals")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run oracle and finite-difference suites")
    p.add_argument("--scope", default="all",
                   help=f"comma list from {', '.join(verify.SUITES)} or 'all'")
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb one side of every comparison (harness self-test)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, StructureError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpnSeqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
