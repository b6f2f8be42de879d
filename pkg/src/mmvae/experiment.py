"""Config-driven pipeline behind the command line: data files, model construction, runs."""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import config as cfgmod
from . import nn
from .aggregation import EncoderSpec, LearnedEncoder
from .datasets import label_plus_continuous, nonlinear_multimodal
from .evaluation import (
    MetricsReport,
    coherence,
    encoded_latents,
    is_log_likelihood,
    label_classifier,
    latent_classification_accuracy,
    mcc,
    rate_distortion_report,
    relative_llh_gap,
)
from .linear_oracle import (
    AnalyticEncoder,
    Dataset,
    LinearGaussianModel,
    LinearModelConfig,
    as_generative_model,
    exact_marginal_llh,
    generate_model,
    linear_model_from_params,
    mle_fit,
    model_mean_llh,
    sample_dataset,
)
from .model import DecoderSpec, GenerativeModel, LatentLayout, ModalitySpec, PriorSpec
from .objectives import ObjectiveConfig
from .training import TrainConfig, train

OUTPUT_ROOT_ENV = "MMVAE_OUTPUT_ROOT"
FLOAT_FMT = "%.17g"


def output_path(path: str | os.PathLike) -> Path:
    """Relative paths are resolved against ``$MMVAE_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# ---------------------------------------------------------------------------
# data generation and files


def generate(config: Mapping) -> tuple[Dataset, Dataset, dict]:
    """Train split, test split and a ground-truth document."""
    ds = config["dataset"]
    kind = ds["kind"]
    rng = np.random.default_rng([int(config["seed"]), 0])
    sigma = cfgmod.dataset_sigma(config)
    if kind == "linear":
        shared = ds["latent_dim"] if ds["private_dim"] > 0 else None
        model = generate_model(rng, LinearModelConfig(
            ds["num_modalities"], ds["latent_dim"], ds["dim_low"], ds["dim_high"], sigma, shared, ds["private_dim"]))
        tr = sample_dataset(model, ds["n_train"], rng, ds["eta"])
        te = sample_dataset(model, ds["n_test"], rng, ds["eta"])
        truth = {"model": model.to_dict()}
    else:
        n = ds["n_train"] + ds["n_test"]
        if kind == "label-plus-continuous":
            full = label_plus_continuous(rng, n, ds["num_classes"], ds["latent_dim"], ds["latent_dim"],
                                         sigma, ds["eta"])
        else:
            full = nonlinear_multimodal(rng, n, ds["num_modalities"], ds["latent_dim"], ds["obs_dim"],
                                        ds["num_classes"], sigma, ds["eta"])
        tr = full.take(np.arange(ds["n_train"]))
        te = full.take(np.arange(ds["n_train"], n))
        truth = {"model": full.meta}
    truth["kind"] = kind
    truth["modalities"] = [[m.kind, m.dim] for m in tr.modalities]
    return tr, te, truth


def dataset_csv(data: Dataset, tag: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={tag}\n")
    header = [f"x{s}_{j}" for s, v in enumerate(data.values) for j in range(v.shape[1])]
    header += [f"m{s}" for s in range(data.num_modalities)]
    buf.write(",".join(header) + "\n")
    table = np.hstack([*data.values, data.observed.astype(np.float64)])
    np.savetxt(buf, table, delimiter=",", fmt=FLOAT_FMT)
    return buf.getvalue()


def _split_truth(data: Dataset) -> dict:
    return {
        "latents": None if data.latents is None else data.latents.tolist(),
        "labels": None if data.labels is None else np.asarray(data.labels).tolist(),
    }


def write_dataset(directory: Path, train_data: Dataset, test_data: Dataset, truth: Mapping, tag: str) -> list:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, data in (("train", train_data), ("test", test_data)):
        p = directory / f"{name}.csv"
        p.write_text(dataset_csv(data, tag))
        paths.append(p)
    doc = dict(truth)
    doc["config_hash"] = tag
    doc["splits"] = {"train": _split_truth(train_data), "test": _split_truth(test_data)}
    p = directory / "ground_truth.json"
    p.write_text(json.dumps(doc, sort_keys=True))
    paths.append(p)
    return paths


def read_dataset(directory: Path) -> tuple[Dataset, Dataset, dict]:
    truth = json.loads((directory / "ground_truth.json").read_text())
    mods = [ModalitySpec(k, d) for k, d in truth["modalities"]]
    out = []
    for name in ("train", "test"):
        table = np.loadtxt(directory / f"{name}.csv", delimiter=",", comments="#", skiprows=2, ndmin=2)
        cuts = np.cumsum([0, *[m.width for m in mods]])
        values = [table[:, cuts[i] : cuts[i + 1]] for i in range(len(mods))]
        observed = table[:, cuts[-1] :] > 0.5
        split = truth["splits"][name]
        latents = None if split["latents"] is None else np.asarray(split["latents"], dtype=np.float64)
        labels = None if split["labels"] is None else np.asarray(split["labels"])
        out.append(Dataset(values, mods, observed, latents, labels, {}))
    return out[0], out[1], truth


def linear_truth(truth: Mapping) -> LinearGaussianModel | None:
    return LinearGaussianModel.from_dict(truth["model"]) if truth.get("kind") == "linear" else None


# ---------------------------------------------------------------------------
# model construction


@dataclass
class Built:
    model: GenerativeModel
    encoder: object
    objective: ObjectiveConfig
    log_scale: float


def decoder_log_scale(config: Mapping, train_data: Dataset, truth: Mapping) -> float:
    """Explicit value, else sigma_ML for linear data (or the true sigma on request), else the data sigma."""
    m = config["model"]
    if m["log_scale"] is not None:
        return float(m["log_scale"])
    if truth["kind"] == "linear" and m["sigma_source"] == "mle":
        fit = mle_fit(train_data.stacked()[train_data.observed.all(axis=1)], config["dataset"]["latent_dim"])
        return float(0.5 * np.log(fit.sigma2))
    return float(np.log(cfgmod.dataset_sigma(config)))


def build(config: Mapping, train_data: Dataset, truth: Mapping, log_scale: float | None = None) -> Built:
    m, e, o = config["model"], config["encoder"], config["objective"]
    ds = config["dataset"]
    kind = truth["kind"]
    if log_scale is None:
        log_scale = decoder_log_scale(config, train_data, truth)
    mods = train_data.modalities
    private = int(ds["private_dim"]) if kind == "linear" else 0
    shared = int(ds["latent_dim"])
    layout = LatentLayout(shared, private, len(mods)) if private > 0 else None
    latent = layout.total_dim if layout else shared
    decoders = []
    for s, mod in enumerate(mods):
        if mod.kind == "categorical":
            decoders.append(DecoderSpec(s, "categorical", mod.dim, tuple(m["hidden"]), activation=m["activation"]))
        elif kind == "linear":
            decoders.append(DecoderSpec(s, "linear-gaussian", mod.dim, log_scale=log_scale, scale_mode=m["scale_mode"]))
        else:
            decoders.append(DecoderSpec(s, "mlp-gaussian", mod.dim, tuple(m["hidden"]), log_scale,
                                        m["scale_mode"], m["activation"]))
    mixture = m["mixture_prior"] if m["mixture_prior"] is not None else kind != "linear"
    prior = PriorSpec("gaussian-mixture", latent, ds["num_classes"]) if mixture else PriorSpec("standard-gaussian", latent)
    gen = GenerativeModel(prior, decoders, list(mods), layout)
    spec = EncoderSpec(e["scheme"], shared, e["feature_dim"], tuple(e["hidden"]), e["pool_dim"],
                       tuple(e["chi_hidden"]), tuple(e["rho_hidden"]), e["attention_width"], e["heads"],
                       e["blocks"], e["ffn_hidden"], e["mixture_components"], e["activation"],
                       shared if private else None, private)
    encoder = LearnedEncoder(spec, gen)
    objective = ObjectiveConfig(o["bound"], float(o["beta"]), o["sampler"], 1, bool(o["private"] or private > 0),
                                bool(o["stl"]), tuple(o["fixed_subset"]))
    return Built(gen, encoder, objective, float(log_scale))


def init_params(config: Mapping, built: Built) -> dict:
    rng = np.random.default_rng([int(config["seed"]), 1])
    params = built.model.init(rng)
    params.update(built.encoder.init(rng))
    return params


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunArtifacts:
    config_path: Path
    checkpoint_path: Path
    log_path: Path
    metrics_path: Path | None = None


def run_train(config: Mapping, data_dir: Path, out_dir: Path, resume: Path | None = None,
              echo: Callable[[str], None] | None = None) -> RunArtifacts:
    tag = cfgmod.config_hash(config)
    tr, _, truth = read_dataset(data_dir)
    if resume is not None:
        params, meta = nn.params_from_json(resume.read_text())
        built = build(config, tr, truth, meta["log_scale"])
    else:
        built = build(config, tr, truth)
        params = init_params(config, built)
    t = config["training"]
    tc = TrainConfig(t["epochs"], t["batch_size"], t["lr_start"], t["lr_end"], int(config["seed"]), t["log_every"])
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as fh:
        def sink(line: str) -> None:
            doc = json.loads(line)
            doc["config_hash"] = tag
            text = json.dumps(doc, sort_keys=True)
            fh.write(text + "\n")
            if echo is not None:
                echo(text)

        result = train(built.model, built.encoder, params, tr, built.objective, tc, sink)
    ckpt = out_dir / "checkpoint.json"
    ckpt.write_text(nn.params_to_json(result.params, config_hash=tag, log_scale=built.log_scale,
                                      steps=result.steps, data_dir=str(data_dir)))
    cfg_path = out_dir / "config.json"
    cfg_path.write_text(cfgmod.dumps(config))
    return RunArtifacts(cfg_path, ckpt, log_path)


def _subsets(m: int) -> list:
    out = []
    for r in range(1, m):
        for members in itertools.combinations(range(m), r):
            mask = np.zeros(m, dtype=bool)
            mask[list(members)] = True
            out.append(mask)
    return out if m <= 5 else [np.eye(m, dtype=bool)[s] for s in range(m)]


def evaluate(config: Mapping, params: Mapping, built: Built, train_data: Dataset, test_data: Dataset,
             truth: Mapping, analytic: bool = False) -> MetricsReport:
    """Metric suite on the test split; unavailable metrics are skipped with a reason."""
    ev = config["evaluation"]
    report = MetricsReport()
    rng = np.random.default_rng([int(config["seed"]), 2])
    n = min(ev["eval_points"], test_data.size)
    test = test_data.take(np.arange(n))
    model, encoder = built.model, built.encoder
    oracle = linear_truth(truth)
    full_rows = test.observed.all(axis=1)
    metrics = list(ev["metrics"])
    m = model.num_modalities

    if analytic:
        if oracle is None:
            raise ValueError("analytic evaluation needs linear data")
        fit = mle_fit(train_data.stacked()[train_data.observed.all(axis=1)], oracle.latent_dim).split(oracle.dims)
        model, params = as_generative_model(fit)
        encoder = AnalyticEncoder(fit)
        params.update(encoder.init())

    if "llh" in metrics:
        est = is_log_likelihood(test.values, np.ones(m, dtype=bool), model, encoder, params,
                                ev["is_samples"], rng, observed=test.observed)
        report.add("is_llh", float(est.estimate[full_rows].mean()) if full_rows.any() else float("nan"))
        report.add("is_llh_se", float(est.estimate[full_rows].std(ddof=1) / np.sqrt(full_rows.sum()))
                   if full_rows.sum() > 1 else float("nan"))
        if oracle is not None:
            ref_rows = test_data.observed.all(axis=1)
            train_rows = train_data.observed.all(axis=1)
            mle = mle_fit(train_data.stacked()[train_rows], oracle.latent_dim).split(oracle.dims)
            llh_mle = model_mean_llh(mle, test_data.stacked()[ref_rows])
            report.add("llh_mle", llh_mle)
            report.add("llh_true", model_mean_llh(oracle, test_data.stacked()[ref_rows]))
            if analytic:
                llh_model = report.values["is_llh"]
                llh_mle = float(np.mean(exact_marginal_llh(mle, [v[full_rows] for v in test.values], range(m))))
                report.add("llh_mle_eval_points", llh_mle)
            else:
                try:
                    fitted = linear_model_from_params(model, params)
                    llh_model = model_mean_llh(fitted, test_data.stacked()[ref_rows])
                except (ValueError, KeyError):
                    llh_model = report.values["is_llh"]
            report.add("llh_model", llh_model)
            report.add("relative_llh_gap", relative_llh_gap(llh_mle, llh_model))
    if "mcc" in metrics:
        if test.latents is None:
            report.skip("mcc", "dataset has no true latents")
        elif test.latents.shape[1] != model.latent_dim:
            report.skip("mcc", "latent dimensions differ")
        else:
            z = encoded_latents(test.values, model, encoder, params, rng, observed=test.observed)
            res = mcc(test.latents, z)
            report.add("mcc", res.value)
            report.add("mcc_regularized", res.regularized)
    if "rates" in metrics:
        if not full_rows.all():
            report.skip("rates", "rates need fully observed points")
        else:
            try:
                rd = rate_distortion_report(test.values, model, encoder, params, _subsets(m),
                                            built.objective.beta, rng, ev["mc_samples"], oracle if analytic else None)
            except ValueError as exc:
                report.skip("rates", str(exc))
            else:
                report.add("full_distortion", rd.full_distortion)
                report.add("full_rate", rd.full_rate)
                report.add("rates_by_subset", rd.rows())
    if "accuracy" in metrics:
        if test.labels is None:
            report.skip("accuracy", "dataset has no labels")
        else:
            k = min(ev["eval_points"], train_data.size)
            tr = train_data.take(np.arange(k))
            z_tr = encoded_latents(tr.values, model, encoder, params, rng, observed=tr.observed)
            z_te = encoded_latents(test.values, model, encoder, params, rng, observed=test.observed)
            report.add("latent_accuracy", latent_classification_accuracy(z_tr, tr.labels, z_te, test.labels,
                                                                         seed=int(config["seed"])))
    if "coherence" in metrics:
        label_mods = [s for s, mod in enumerate(model.modalities) if mod.kind == "categorical"]
        if test.labels is None or not label_mods or not full_rows.all():
            report.skip("coherence", "needs a label modality and fully observed points")
        else:
            target = label_mods[0]
            classifiers = {target: label_classifier}
            table = {}
            for s in range(m):
                mask = np.zeros(m, dtype=bool)
                mask[s] = True
                table[f"{s}->{target}"] = coherence(test.values, test.labels, mask, target, model, encoder,
                                                    params, classifiers, rng)
            report.add("coherence", table)
    return report


def run_evaluate(run_dir: Path, data_dir: Path | None = None, analytic: bool = False) -> tuple[Path, Path]:
    config = json.loads((run_dir / "config.json").read_text())
    tag = cfgmod.config_hash(config)
    params, meta = nn.params_from_json((run_dir / "checkpoint.json").read_text())
    data_dir = Path(meta["data_dir"]) if data_dir is None else data_dir
    tr, te, truth = read_dataset(data_dir)
    built = build(config, tr, truth, meta["log_scale"])
    report = evaluate(config, params, built, tr, te, truth, analytic)
    doc = {"config_hash": tag, **report.to_dict()}
    jpath = run_dir / ("metrics_analytic.json" if analytic else "metrics.json")
    jpath.write_text(json.dumps(doc, sort_keys=True, indent=2))
    cpath = jpath.with_suffix(".csv")
    cpath.write_text(metrics_csv(report, tag))
    return jpath, cpath


def flatten_metrics(report: MetricsReport) -> dict:
    flat = {}
    for key, value in report.values.items():
        if isinstance(value, dict):
            for k, v in value.items():
                flat[f"{key}[{k}]"] = v
        elif isinstance(value, list):
            for row in value:
                name = "".join(str(s) for s in row["subset"])
                for k, v in row.items():
                    if k != "subset" and v is not None:
                        flat[f"{key}[{name}].{k}"] = v
        else:
            flat[key] = value
    return flat


def metrics_csv(report: MetricsReport, tag: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "config_hash"])
    for key, value in sorted(flatten_metrics(report).items()):
        writer.writerow([key, repr(float(value)) if isinstance(value, float) else value, tag])
    return buf.getvalue()


def oracle_summary(data_dir: Path, beta: float = 1.0, points: int = 10) -> dict:
    """Exact log-likelihoods and posteriors of the first test points for a linear dataset."""
    _, te, truth = read_dataset(data_dir)
    model = linear_truth(truth)
    if model is None:
        raise ValueError("oracle quantities exist only for linear datasets")
    from .linear_oracle import exact_posterior

    rows = []
    m = model.num_modalities
    for i in range(min(points, te.size)):
        obs = [s for s in range(m) if te.observed[i, s]]
        x = [v[i] for v in te.values]
        post = exact_posterior(model, x, obs, beta)
        rows.append({
            "index": i,
            "observed": obs,
            "log_likelihood": float(exact_marginal_llh(model, x, obs, beta)),
            "posterior_mean": post.mean.tolist(),
            "posterior_covariance": post.covariance.tolist(),
        })
    full = te.observed.all(axis=1)
    mean_llh = model_mean_llh(model, te.stacked()[full]) if full.any() else float("nan")
    return {"config_hash": truth.get("config_hash"), "beta": beta, "mean_llh_full_rows": mean_llh, "points": rows}
