"""Two-stage orchestration: stress-test, then reinforcement.

Every run writes an isolated directory under the run root with all
intermediate artifacts and a manifest. Stage 2 consumes only files written
by stage 1. All randomness flows from seeds recorded in the manifest.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import build_backend, load_world
from .backends.synthetic import SyntheticWorld
from .editing import load_counterfactuals, save_counterfactuals, select_tau, ddim_invert, optimize_null_text
from .evaluation import LabeledSet, build_weakness_report, load_labeled_set
from .params import save_parameters
from .perturbation import (
    CaptionEdit,
    FilterPolicy,
    VariationFactor,
    Verdict,
    filter_edits,
    generate_edits,
    save_edits,
)
from .reinforcement import TrainConfig, augment_standard, reinforce
from .types import CfkitError, ZeroVectorError

DEFAULT_CONFIG: dict = {
    "run_root": "runs",
    "dataset_dir": "data",
    "seed": 0,
    "backends": {
        "captioner": {"name": "toy", "seed": 0},
        "perturber": {"name": "toy", "seed": 0},
        "sentence_embedder": {"name": "toy", "seed": 0},
        "joint_encoder": {"name": "toy", "seed": 0},
        "generator": {"name": "toy", "seed": 0, "num_steps": 50},
        "classifier": {"name": "toy", "seed": 0},
    },
    "classifier_pretrain": {"manifest": "pretrain.jsonl", "epochs": 300, "lr": 0.01},
    "stress": {
        "dataset_manifest": "test.jsonl",
        "factors": ["background"],
        "n_edits_per_factor": 1,
        "tau_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "caption_min_words": 20,
        "repetition_penalty": 1.5,
        "inversion_steps": 50,
        "cache_captions": False,
        "jobs": 1,
    },
    "filter_policy": {
        "max_similarity": 0.95,
        "min_caption_tokens": 3,
        "synonyms": {},
    },
    "train": {
        "batch_size": 8,
        "learning_rate": 0.0001,
        "max_epochs": 50,
        "min_delta": 0.005,
        "alpha": 0.3,
        "seed": 0,
        "patience": 5,
        "val_fraction": 0.2,
    },
    "reinforce": {
        "eval_manifests": ["test.jsonl", "ood.jsonl", "hybrid.jsonl"],
        "standard_arm": True,
        "standard_train_manifest": "train.jsonl",
    },
}


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    import yaml

    config = DEFAULT_CONFIG
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        config = merge_config(config, loaded)
    if overrides:
        config = merge_config(config, overrides)
    return config


def apply_dotted_overrides(config: dict, pairs: list[str]) -> dict:
    """Apply key=value overrides with dotted paths, e.g. train.alpha=0.5."""
    import yaml

    out = json.loads(json.dumps(config))
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunManifest:
    run_id: str
    stage: str
    config_hash: str
    backend_descriptors: list[dict]
    seeds: dict
    artifact_paths: dict
    timestamps: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _new_run_dir(run_root: Path, prefix: str, chash: str) -> tuple[str, Path]:
    run_root.mkdir(parents=True, exist_ok=True)
    seq = 0
    while True:
        run_id = f"{prefix}-{chash[:8]}-{seq:03d}"
        run_dir = run_root / run_id
        if not run_dir.exists():
            run_dir.mkdir()
            return run_id, run_dir
        seq += 1


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def build_backends(config: dict, world: SyntheticWorld) -> dict:
    kinds = ("captioner", "perturber", "sentence_embedder", "joint_encoder", "generator", "classifier")
    return {kind: build_backend(kind, config["backends"].get(kind, {}), world) for kind in kinds}


def pretrain_classifier(classifier, config: dict, world: SyntheticWorld) -> None:
    """Fit the toy classifier head on the biased pretraining manifest."""
    pre = config["classifier_pretrain"]
    manifest = Path(config["dataset_dir"]) / pre["manifest"]
    pretrain_set = load_labeled_set(manifest, "pretrain", list(world.classes))
    images = [img for img, _ in pretrain_set.items]
    labels = [lab for _, lab in pretrain_set.items]
    classifier.fit_head(images, labels, epochs=int(pre["epochs"]), lr=float(pre["lr"]))


def _filter_policy(config: dict) -> FilterPolicy:
    fp = config["filter_policy"]
    synonyms = fp.get("synonyms", {})
    if isinstance(synonyms, str):
        synonyms = json.loads(Path(synonyms).read_text())
    return FilterPolicy(
        max_similarity=float(fp["max_similarity"]),
        class_synonyms={k: set(v) for k, v in synonyms.items()},
        min_caption_tokens=int(fp["min_caption_tokens"]),
    )


def run_stress_test(config: dict) -> tuple[LabeledSet, "object", RunManifest]:
    """Stage 1: caption, perturb, filter, edit with tau selection, evaluate.

    Returns the counterfactual set T', the weakness report and the manifest.
    """
    stress = config["stress"]
    factors = {VariationFactor(f) for f in stress["factors"]}
    if not factors:
        raise ValueError("stress-test needs at least one variation factor")
    dataset_dir = Path(config["dataset_dir"])
    world = load_world(dataset_dir)
    backends = build_backends(config, world)
    pretrain_classifier(backends["classifier"], config, world)
    policy = _filter_policy(config)
    chash = config_hash(config)
    started = _now()
    run_id, run_dir = _new_run_dir(Path(config["run_root"]), "stress", chash)

    T = load_labeled_set(dataset_dir / stress["dataset_manifest"], "T", list(world.classes))
    K = int(stress["inversion_steps"])
    tau_grid = [float(t) for t in stress["tau_grid"]]
    min_words = int(stress["caption_min_words"])
    rep_penalty = float(stress["repetition_penalty"])

    cache_path = None
    caption_cache: dict[str, str] = {}
    if stress.get("cache_captions"):
        cache_dir = Path(config["run_root"]) / ".cache"
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = cache_dir / f"captions-{backends['captioner'].descriptor.name}-{chash[:8]}.json"
        if cache_path.exists():
            caption_cache = json.loads(cache_path.read_text())

    generator = backends["generator"]
    encoder = backends["joint_encoder"]

    def process_item(item: tuple) -> dict:
        image, gt = item
        out = {"captions": None, "edits": [], "examples": [], "skipped": None}
        caption = caption_cache.get(image.id)
        if caption is None:
            caption = backends["captioner"].caption(image, min_words=min_words,
                                                    repetition_penalty=rep_penalty)
        out["captions"] = {"image": image.id, "label": gt, "caption": caption}
        edits = generate_edits(caption, factors, int(stress["n_edits_per_factor"]),
                               backends["perturber"])
        edits = filter_edits(edits, gt, policy, backends["sentence_embedder"])
        out["edits"] = edits
        accepted = [e for e in edits if e.verdict == Verdict.ACCEPTED]
        if not accepted:
            out["skipped"] = {"image": image.id, "reason": "all edits rejected"}
            return out
        z0 = generator.encode_image(image)
        trajectory = ddim_invert(z0, generator.embed_caption(caption), K, generator)
        schedule = optimize_null_text(trajectory, generator_backend=generator)
        failures = []
        for edit in accepted:
            try:
                _, example = select_tau(
                    image, edit, tau_grid,
                    generator_backend=generator, encoder_backend=encoder,
                    gt_class=gt, trajectory=trajectory, schedule=schedule,
                )
            except ZeroVectorError as exc:
                failures.append(str(exc))
                continue
            out["examples"].append(example)
        if not out["examples"]:
            out["skipped"] = {"image": image.id, "reason": "all tau candidates failed: " + "; ".join(failures)}
        return out

    jobs = int(stress.get("jobs", 1))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(process_item, T.items))
    else:
        results = [process_item(item) for item in T.items]

    captions_rows, all_edits, examples, skipped = [], [], [], []
    for res in results:
        captions_rows.append(res["captions"])
        all_edits.extend(res["edits"])
        examples.extend(res["examples"])
        if res["skipped"]:
            skipped.append(res["skipped"])

    if not examples:
        raise CfkitError("stress test produced zero counterfactuals")

    captions_path = run_dir / "captions.jsonl"
    with captions_path.open("w") as f:
        for row in captions_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    if cache_path is not None:
        caption_cache.update({r["image"]: r["caption"] for r in captions_rows})
        cache_path.write_text(json.dumps(caption_cache, sort_keys=True))
    edits_path = run_dir / "edits.jsonl"
    save_edits(all_edits, edits_path)
    cf_dir = run_dir / "counterfactuals"
    save_counterfactuals(examples, cf_dir)

    # Rebuild T' from the persisted files so the report reflects exactly what
    # stage 2 will consume (8-bit quantized images).
    loaded = load_counterfactuals(cf_dir)
    T_prime = LabeledSet([(ex.image, ex.gt_class) for ex in loaded], "T_prime", list(world.classes))
    cf_metadata = {ex.image.id: ex.edit.factor.value for ex in loaded}

    report = build_weakness_report(T, T_prime, cf_metadata, backends["classifier"])
    report.metadata["similarity_threshold"] = policy.max_similarity
    report.metadata["one_counterfactual_per_accepted_edit"] = True
    reports_dir = run_dir / "reports"
    reports_dir.mkdir()
    report_path = reports_dir / "weakness.json"
    report_path.write_text(report.to_json())
    (reports_dir / "weakness.csv").write_text(report.to_csv())

    manifest = RunManifest(
        run_id=run_id,
        stage="stress_test",
        config_hash=chash,
        backend_descriptors=[b.descriptor.as_dict() for b in backends.values()],
        seeds={"global": config["seed"]},
        artifact_paths={
            "captions": str(captions_path),
            "edits": str(edits_path),
            "counterfactuals": str(cf_dir),
            "report": str(report_path),
            "report_csv": str(reports_dir / "weakness.csv"),
        },
        timestamps={"started": started, "finished": _now()},
        counts={
            "T": len(T),
            "T_prime": len(T_prime),
            "edits_total": len(all_edits),
            "edits_accepted": sum(1 for e in all_edits if e.verdict == Verdict.ACCEPTED),
        },
        skipped=skipped,
    )
    (run_dir / "manifest.json").write_text(manifest.to_json())
    return T_prime, report, manifest


def run_reinforcement(stress_run_id: str, config: dict,
                      eval_set_manifests: list[str] | None = None) -> RunManifest:
    """Stage 2: fine-tune the head on T', blend, and compare on every eval set."""
    run_root = Path(config["run_root"])
    stress_dir = run_root / stress_run_id
    manifest_path = stress_dir / "manifest.json"
    if not manifest_path.exists():
        raise CfkitError(f"stress-test run {stress_run_id!r} not found under {run_root}")
    stress_manifest = RunManifest.load(manifest_path)
    cf_dir = Path(stress_manifest.artifact_paths["counterfactuals"])
    if not (cf_dir / "metadata.jsonl").exists():
        raise CfkitError(f"stress-test run {stress_run_id!r} produced no counterfactuals")

    dataset_dir = Path(config["dataset_dir"])
    world = load_world(dataset_dir)
    backends = build_backends(config, world)
    classifier = backends["classifier"]
    pretrain_classifier(classifier, config, world)

    tc = config["train"]
    train_config = TrainConfig(
        batch_size=int(tc["batch_size"]), learning_rate=float(tc["learning_rate"]),
        max_epochs=int(tc["max_epochs"]), min_delta=float(tc["min_delta"]),
        alpha=float(tc["alpha"]), seed=int(tc["seed"]), patience=int(tc["patience"]),
        alpha_grid_search=bool(tc.get("alpha_grid_search", False)),
        blend_per_epoch=bool(tc.get("blend_per_epoch", False)),
    )

    examples = load_counterfactuals(cf_dir)
    items = [(ex.image, ex.gt_class) for ex in examples]
    rng = np.random.default_rng(train_config.seed)
    order = rng.permutation(len(items))
    n_val = max(1, int(round(float(tc.get("val_fraction", 0.2)) * len(items))))
    val_idx = set(order[:n_val].tolist())
    cf_train_items = [items[i] for i in range(len(items)) if i not in val_idx]
    val_items = [items[i] for i in sorted(val_idx)]
    if not cf_train_items:
        raise CfkitError("counterfactual set too small to split for validation")
    cf_train = LabeledSet(cf_train_items, "cf_train", list(world.classes))
    val_set = LabeledSet(val_items, "cf_val", list(world.classes))

    manifests = eval_set_manifests
    if manifests is None:
        manifests = config["reinforce"]["eval_manifests"]
    eval_sets = []
    for m in manifests:
        path = Path(m)
        if not path.exists():
            path = dataset_dir / m
        eval_sets.append(load_labeled_set(path, Path(m).stem, list(world.classes)))

    std_train = None
    if config["reinforce"].get("standard_arm"):
        std_manifest = dataset_dir / config["reinforce"]["standard_train_manifest"]
        base_train = load_labeled_set(std_manifest, "std_train", list(world.classes))
        std_train = augment_standard(base_train, seed=train_config.seed)

    chash = config_hash(config)
    started = _now()
    run_id, run_dir = _new_run_dir(run_root, "reinforce", chash)

    theta0 = classifier.get_parameters()
    blended, comparisons, record = reinforce(
        classifier, cf_train, val_set, eval_sets, train_config, std_train=std_train,
    )

    params_dir = run_dir / "params"
    save_parameters(theta0, params_dir / "baseline")
    save_parameters(blended, params_dir / "blended")
    reports_dir = run_dir / "reports"
    reports_dir.mkdir()
    report_paths = {}
    for set_name, comparison in comparisons.items():
        path = reports_dir / f"comparison_{set_name}.json"
        path.write_text(comparison.to_json())
        (reports_dir / f"comparison_{set_name}.csv").write_text(comparison.to_csv())
        report_paths[set_name] = str(path)

    manifest = RunManifest(
        run_id=run_id,
        stage="reinforce",
        config_hash=chash,
        backend_descriptors=[b.descriptor.as_dict() for b in backends.values()],
        seeds={"global": config["seed"], "train": train_config.seed},
        artifact_paths={
            "stress_run": str(stress_dir),
            "parameters": str(params_dir),
            "comparisons": report_paths,
        },
        timestamps={"started": started, "finished": _now()},
        counts={"cf_train": len(cf_train), "cf_val": len(val_set),
                "epochs_run": record.epochs_run},
        notes={"stopped_early": record.stopped_early,
               "epoch_metrics": record.epoch_metrics},
    )
    (run_dir / "manifest.json").write_text(manifest.to_json())
    return manifest
