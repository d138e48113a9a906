"""Command-line entry points.

    weakalign synth-gen          generate a planted synthetic world
    weakalign build-corpus       retrieve top-K sentences per image
    weakalign pretrain           run the curriculum pretraining loop
    weakalign probe              ITM / grounding accuracy of a checkpoint
    weakalign grad-check         finite-difference check of all gradients
    weakalign inspect-attention  dump text-to-region attention as CSV
    weakalign ablate-k           corpus-size sweep over retrieval K
    weakalign ablate-ratio       alignment-ratio sweep with seeds

Exit codes: 0 success, 2 validation error, 3 threshold failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import aligner, corpus, train as train_mod
from .corpus import SchemaError, WorldSpec
from .embedder import PROVIDERS, BagOfWordsProvider, build_weak_corpus
from .train import TrainConfig, Trainer, load_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_THRESHOLD = 3


def _bool_flag(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _load_data_dir(data_dir, prefix=""):
    images = corpus.load_images(os.path.join(data_dir, f"{prefix}images.jsonl"))
    texts = corpus.load_texts(os.path.join(data_dir, f"{prefix}texts.jsonl"))
    return images, texts


def _make_provider(name: str, vocab_words):
    if name == "bow":
        return BagOfWordsProvider(list(vocab_words))
    if name == "hash":
        return PROVIDERS["hash"]()
    raise ValueError(f"unknown provider {name!r}; choose from {sorted(PROVIDERS)}")


def cmd_synth_gen(args) -> int:
    spec = WorldSpec(
        n_concepts=args.concepts,
        feature_dim=args.feature_dim,
        noise_sigma=args.sigma,
        concepts_per_image=(args.min_concepts, args.max_concepts),
        n_images=args.images,
        n_eval_images=args.eval_images,
        n_distractors=args.distractors,
        adjective_prob=args.adjective_prob,
        seed=args.seed,
    )
    world = corpus.generate_world(spec)
    corpus.write_world(world, args.out)
    print(f"world written to {args.out}: {len(world.images)} images, "
          f"{len(world.texts)} texts, {len(world.eval_images)} eval images")
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    if args.k < 1:
        raise ValueError(f"--k must be >= 1, got {args.k}")
    images = corpus.load_images(args.images)
    texts = corpus.load_texts(args.texts)
    provider = _make_provider(args.provider, texts.vocab.words)
    pairs, skipped = build_weak_corpus(images.region_sets, texts.sentences, provider, k=args.k)
    corpus.attach_links(pairs, images, texts, provider)
    os.makedirs(args.out, exist_ok=True)
    pairs_path = os.path.join(args.out, "pairs.jsonl")
    corpus.write_pairs(pairs_path, pairs, provider.name, args.k, skipped)
    with open(os.path.join(args.out, "skips.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "reason"])
        for image_id in skipped:
            w.writerow([image_id, "no usable tags"])
    aligner.write_link_report(pairs, texts.by_id, os.path.join(args.out, "link_report.csv"))
    print(f"{len(pairs)} pairs written to {pairs_path} ({len(skipped)} images skipped)")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "warmup_epochs": args.warmup_epochs, "weighted_itm": args.weighted_itm,
        "peak_lr": args.peak_lr,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    images, texts = _load_data_dir(args.data)
    pairs = corpus.load_pairs(args.pairs or os.path.join(args.data, "pairs.jsonl"), images, texts)
    trainer = Trainer(config, images, texts, pairs, args.out, resume_from=args.resume)
    metrics_path = trainer.run()
    print(f"metrics: {metrics_path}")
    print(f"final checkpoint: {trainer.final_checkpoint_dir()}")
    return EXIT_OK


def cmd_probe(args) -> int:
    model, _ = train_mod.model_from_checkpoint(args.checkpoint)
    prefix = "eval_" if os.path.exists(os.path.join(args.data, "eval_images.jsonl")) else ""
    images, texts = _load_data_dir(args.data, prefix)
    truth = corpus.load_truth(os.path.join(args.data, f"{prefix}truth.jsonl"))
    if args.suite == "itm":
        result = train_mod.itm_probe(model, images, texts, truth, seed=args.seed)
    else:
        result = train_mod.grounding_probe(model, images, texts, truth)
    print(f"{args.suite} probe: accuracy {result.accuracy:.4f} over {result.n} cases "
          f"(chance {result.chance:.4f})")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["suite", "accuracy", "n", "chance"])
            w.writerow([args.suite, result.accuracy, result.n, result.chance])
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = load_config(args.config)
    report = train_mod.run_grad_check(config.model_config(), seed=args.seed, samples=args.samples)
    worst = 0.0
    for name in sorted(report):
        err = report[name]
        worst = max(worst, err)
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:24s} max_rel_err {err:.3e}  {status}")
    print(f"worst {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_THRESHOLD


def cmd_inspect_attention(args) -> int:
    model, _ = train_mod.model_from_checkpoint(args.checkpoint)
    images, texts = _load_data_dir(args.data)
    if args.image_id not in images.by_id:
        raise ValueError(f"unknown image id {args.image_id!r}")
    if args.text_id not in texts.by_id:
        raise ValueError(f"unknown text id {args.text_id!r}")
    image = images.by_id[args.image_id]
    sentence = texts.by_id[args.text_id]
    from .fusion import collate, text_to_region_attention

    fused = collate([(list(sentence.token_ids), image, [])], model.config, dtype=model.dtype)
    _, averaged = text_to_region_attention(model, fused, layer=args.layer)
    matrix = averaged[0]
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [r.tag for r in image.regions])
        for word, row in zip(sentence.words, matrix):
            w.writerow([word] + [repr(float(x)) for x in row])
    print(f"attention matrix ({matrix.shape[0]} tokens x {matrix.shape[1]} regions) -> {args.out}")
    return EXIT_OK


def _probe_after_training(out_dir, data_dir, seed=0):
    model, _ = train_mod.model_from_checkpoint(
        sorted(os.path.join(out_dir, "checkpoints", d)
               for d in os.listdir(os.path.join(out_dir, "checkpoints")))[-1])
    prefix = "eval_" if os.path.exists(os.path.join(data_dir, "eval_images.jsonl")) else ""
    images, texts = _load_data_dir(data_dir, prefix)
    truth = corpus.load_truth(os.path.join(data_dir, f"{prefix}truth.jsonl"))
    itm = train_mod.itm_probe(model, images, texts, truth, seed=seed)
    grounding = train_mod.grounding_probe(model, images, texts, truth)
    return itm, grounding


def cmd_ablate_k(args) -> int:
    config = load_config(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    images, texts = _load_data_dir(args.data)
    provider = _make_provider(args.provider, texts.vocab.words)
    k_values = [int(v) for v in args.k_values.split(",")]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for k in k_values:
        arm_dir = os.path.join(args.out, f"k_{k}")
        pairs, skipped = build_weak_corpus(images.region_sets, texts.sentences, provider, k=k)
        corpus.attach_links(pairs, images, texts, provider)
        corpus.write_pairs(os.path.join(args.out, f"pairs_k{k}.jsonl"), pairs, provider.name, k, skipped)
        trainer = Trainer(config, images, texts, pairs, arm_dir)
        trainer.run()
        itm, grounding = _probe_after_training(arm_dir, args.data, seed=config.seed)
        rows.append({"k": k, "itm_accuracy": itm.accuracy, "grounding_accuracy": grounding.accuracy,
                     "pairs": len(pairs)})
        print(f"k={k}: itm {itm.accuracy:.4f}, grounding {grounding.accuracy:.4f}")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["k", "pairs", "itm_accuracy", "grounding_accuracy"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return EXIT_OK


def cmd_ablate_ratio(args) -> int:
    config = load_config(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    config.weighted_itm = args.weighted_itm
    images, texts = _load_data_dir(args.data)
    truth = corpus.load_truth(os.path.join(args.data, "truth.jsonl"))
    provider = _make_provider(args.provider, texts.vocab.words)
    ratios = [float(v) for v in args.ratios.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for ratio in ratios:
        for seed in seeds:
            pairing = corpus.mix_alignment_ratio(
                [(t.image_id, t.text_id) for t in truth], ratio, seed)
            pairs = []
            from .embedder import embed_tag_query

            for image_id, text_id, _ in pairing:
                image = images.by_id[image_id]
                query = embed_tag_query(image.tags, provider)
                score = float(np.dot(query, provider.embed(texts.by_id[text_id].text)))
                pairs.append(aligner.WeakPair(image_id=image_id, text_id=text_id, rank=0,
                                              score=score, label=1))
            corpus.attach_links(pairs, images, texts, provider)
            arm_cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
            arm_dir = os.path.join(args.out, f"ratio_{ratio:g}_seed_{seed}")
            corpus.write_pairs(os.path.join(arm_dir + "_pairs.jsonl"), pairs, provider.name, 1, [])
            trainer = Trainer(arm_cfg, images, texts, pairs, arm_dir)
            trainer.run()
            itm, _ = _probe_after_training(arm_dir, args.data, seed=seed)
            rows.append({"ratio": ratio, "seed": seed, "itm_accuracy": itm.accuracy})
            print(f"ratio={ratio:g} seed={seed}: itm {itm.accuracy:.4f}")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["ratio", "seed", "itm_accuracy"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    medians = {}
    for ratio in ratios:
        medians[ratio] = float(np.median([r["itm_accuracy"] for r in rows if r["ratio"] == ratio]))
        print(f"ratio={ratio:g}: median itm {medians[ratio]:.4f}")
    with open(os.path.join(args.out, "medians.json"), "w") as fh:
        json.dump({str(k): v for k, v in medians.items()}, fh, indent=1)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakalign", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a planted synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=200, help="training images (default 200)")
    p.add_argument("--eval-images", type=int, default=0, help="held-out images (default 0)")
    p.add_argument("--distractors", type=int, default=1000, help="distractor sentences (default 1000)")
    p.add_argument("--concepts", type=int, default=30, help="concept vocabulary size (default 30)")
    p.add_argument("--feature-dim", type=int, default=16, help="region feature dim (default 16)")
    p.add_argument("--sigma", type=float, default=0.1, help="feature noise std (default 0.1)")
    p.add_argument("--min-concepts", type=int, default=6, help="min concepts per image (default 6)")
    p.add_argument("--max-concepts", type=int, default=6, help="max concepts per image (default 6)")
    p.add_argument("--adjective-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("build-corpus", help="retrieve top-K sentences per image")
    p.add_argument("--images", required=True, help="images.jsonl path")
    p.add_argument("--texts", required=True, help="texts.jsonl path")
    p.add_argument("--k", type=int, default=5, help="retrieved sentences per image (default 5)")
    p.add_argument("--provider", default="bow", choices=sorted(PROVIDERS),
                   help="embedding provider (default bow)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_build_corpus)

    p = sub.add_parser("pretrain", help="run the curriculum pretraining loop")
    p.add_argument("--config", default="toy", help="config file or preset name (default toy; 'paper' for full scale)")
    p.add_argument("--data", required=True, help="directory with images/texts/pairs jsonl files")
    p.add_argument("--pairs", default=None, help="explicit pairs.jsonl (default <data>/pairs.jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None,
                   help="epochs before alignment weighting starts (default 1)")
    p.add_argument("--weighted-itm", type=_bool_flag, default=None,
                   help="weight phrase/sentence bundles by the match score (default true)")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="ITM / grounding accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, choices=("itm", "grounding"))
    p.add_argument("--data", required=True, help="world directory (eval_* files used when present)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional CSV report path")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--config", default="toy")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=128,
                   help="finite-differenced components per parameter; 0 checks every component (default 128)")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("inspect-attention", help="dump text-to-region attention as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--text-id", required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_attention)

    p = sub.add_parser("ablate-k", help="sweep the number of retrieved sentences")
    p.add_argument("--config", default="toy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-values", default="1,5,10")
    p.add_argument("--provider", default="bow", choices=sorted(PROVIDERS))
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_ablate_k)

    p = sub.add_parser("ablate-ratio", help="sweep the aligned-pair ratio")
    p.add_argument("--config", default="toy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0,0.5,1.0")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--provider", default="bow", choices=sorted(PROVIDERS))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--weighted-itm", type=_bool_flag, default=True)
    p.set_defaults(fn=cmd_ablate_ratio)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, corpus.CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
