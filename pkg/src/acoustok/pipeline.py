"""Pipeline stages behind the command-line interface.

Every stage reads its upstream artifacts from the run directory, writes its
outputs atomically, and appends a manifest line with content hashes.  A stage
whose manifest line is present and whose outputs still match their hashes is
skipped, so interrupted runs resume where they stopped.  Artifact names follow
the TOK-kth / BNF-kth / MR-r scheme, with k the feedback iteration and r the
number of reinforcement rounds applied.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evalviz, mdnn, reinforce, retrieval, tokenizer
from .config import PipelineConfig, config_sha256, dump_config
from .corpus import (
    Corpus,
    FeatureSequence,
    GroundTruth,
    apply_cmvn,
    extract_features,
    load_audio,
    matf_bytes,
    read_ground_truth,
    synthesize_corpus,
    utterance_stats,
    window_context,
)
from .initialization import make_initial_labels
from .labels import labels_to_jsonl, read_labels_jsonl
from .manifest import Manifest, StageWriter, atomic_write_text, file_sha256
from .mdnn import build_targets, extract_bnf, make_iteration_input, read_matn, train_mdnn
from .reinforce import build_documents, fuse_boundaries, lda_fit, relabel
from .tokenizer import read_matm, run_mat


class PipelineError(RuntimeError):
    pass


@dataclass
class RunContext:
    cfg: PipelineConfig
    out: Path
    manifest: Manifest
    config_sha: str

    @classmethod
    def create(cls, cfg: PipelineConfig) -> "RunContext":
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "config.snapshot.ini", dump_config(cfg))
        return cls(cfg, out, Manifest(out), config_sha256(cfg))


def stage_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def ordinal(k: int) -> str:
    return {1: "1st", 2: "2nd", 3: "3rd"}.get(k, f"{k}th")


def features_dir(iteration: int) -> str:
    """Iteration 1 consumes the acoustic features; later iterations consume
    the bottleneck features extracted in the previous iteration."""
    return "features" if iteration == 1 else f"iter{iteration - 1}/bnf"


def tok_dir(iteration: int, mr_round: int) -> str:
    return f"iter{iteration}/TOK-{ordinal(iteration)}_MR-{mr_round}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing upstream artifact: {what} ({path})")
    return path


def _load_corpus(ctx: RunContext, rel_dir: str) -> tuple[Corpus, dict[str, str]]:
    directory = _require(ctx.out / rel_dir, f"feature directory {rel_dir}")
    corpus = corpus_mod.load_corpus(directory)
    inputs = {f"{rel_dir}/corpus.jsonl": file_sha256(directory / "corpus.jsonl")}
    return corpus, inputs


def _add_corpus(writer: StageWriter, rel_dir: str, corpus: Corpus):
    lines = []
    for seq in corpus:
        writer.add_bytes(f"{rel_dir}/{seq.utterance_id}.matf", matf_bytes(seq))
        lines.append(json.dumps({
            "utt": seq.utterance_id,
            "frames": seq.n_frames,
            "dim": seq.dim,
            "frame_shift": seq.frame_shift,
            "speaker": corpus.speakers.get(seq.utterance_id),
        }))
    writer.add_text(f"{rel_dir}/corpus.jsonl", "\n".join(lines) + "\n")


def _run_stage(ctx: RunContext, key: str, work) -> bool:
    """Run a stage unless the manifest shows it complete; returns True if run."""
    if ctx.manifest.is_complete(key, ctx.out, ctx.config_sha):
        return False
    start = time.perf_counter()
    writer = StageWriter(ctx.out)
    inputs = work(writer)
    outputs = writer.commit()
    ctx.manifest.record(key, outputs, inputs or {}, ctx.config_sha,
                        time.perf_counter() - start)
    return True


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(ctx: RunContext):
    def work(writer: StageWriter):
        corpus, truth = synthesize_corpus(ctx.cfg.synth, ctx.cfg.seed)
        _add_corpus(writer, "features", corpus)
        lines = []
        for utt in sorted(truth.spans):
            for token, start, end in truth.spans[utt]:
                lines.append(json.dumps({"utt": utt, "token": token, "start": start, "end": end}))
        writer.add_text("truth.jsonl", "\n".join(lines) + "\n")
        return {}

    _run_stage(ctx, "synth", work)


def cmd_features(ctx: RunContext):
    def work(writer: StageWriter):
        audio_dir = Path(ctx.cfg.audio_dir)
        if not ctx.cfg.audio_dir or not audio_dir.exists():
            raise PipelineError(f"audio_dir not found: {ctx.cfg.audio_dir!r}")
        wavs = sorted(audio_dir.glob("*.wav"))
        if not wavs:
            raise PipelineError(f"no .wav files in {audio_dir}")
        inputs = {}
        sequences = []
        for wav in wavs:
            inputs[str(wav)] = file_sha256(wav)
            seq = extract_features(load_audio(wav), ctx.cfg.features)
            if ctx.cfg.features.cmvn:
                seq = apply_cmvn(seq)
            sequences.append(seq)
        _add_corpus(writer, "features", Corpus(sequences))
        return inputs

    _run_stage(ctx, "features", work)


def cmd_init(ctx: RunContext, iteration: int = 1):
    def work(writer: StageWriter):
        corpus, inputs = _load_corpus(ctx, features_dir(iteration))
        for n in ctx.cfg.grid.phonetic:
            labels = make_initial_labels(
                corpus, n, stage_seed(ctx.cfg.seed, f"init/{iteration}/{n}"), ctx.cfg.init
            )
            writer.add_text(f"iter{iteration}/init/labels_n{n}.jsonl", labels_to_jsonl(labels))
        return inputs

    _run_stage(ctx, f"iter{iteration}/init", work)


def _labels_source(iteration: int, mr_round: int) -> str:
    if mr_round == 0:
        return f"iter{iteration}/init"
    return f"iter{iteration}/mr{mr_round}"


def cmd_mat(ctx: RunContext, iteration: int = 1, mr_round: int = 0):
    def work(writer: StageWriter):
        corpus, inputs = _load_corpus(ctx, features_dir(iteration))
        src = _labels_source(iteration, mr_round)
        init_labels = {}
        for n in ctx.cfg.grid.phonetic:
            path = _require(ctx.out / src / f"labels_n{n}.jsonl", f"{src} labels for n={n}")
            inputs[f"{src}/labels_n{n}.jsonl"] = file_sha256(path)
            init_labels[n] = read_labels_jsonl(path)
        models, labels = run_mat(corpus, ctx.cfg.grid, init_labels, ctx.cfg.tokenizer)
        base = tok_dir(iteration, mr_round)
        for g in ctx.cfg.grid.levels():
            writer.add_bytes(f"{base}/model_m{g.m}_n{g.n}.matm", tokenizer.matm_bytes(models[g]))
            writer.add_text(f"{base}/labels_m{g.m}_n{g.n}.jsonl", labels_to_jsonl(labels[g]))
        return inputs

    _run_stage(ctx, f"iter{iteration}/mat_mr{mr_round}", work)


def _load_level_labels(ctx: RunContext, rel_dir: str):
    labels = {}
    inputs = {}
    for g in ctx.cfg.grid.levels():
        path = _require(ctx.out / rel_dir / f"labels_m{g.m}_n{g.n}.jsonl",
                        f"level labels {rel_dir} ({g.m},{g.n})")
        inputs[f"{rel_dir}/labels_m{g.m}_n{g.n}.jsonl"] = file_sha256(path)
        labels[g] = read_labels_jsonl(path)
    return labels, inputs


def cmd_mr(ctx: RunContext, iteration: int = 1, mr_round: int = 1):
    """Reinforcement round r reads the MAT labels of round r-1 and emits the
    round-r initial label sets plus the fused boundaries, the documents, and
    the per-n LDA models."""
    def work(writer: StageWriter):
        level_labels, inputs = _load_level_labels(ctx, tok_dir(iteration, mr_round - 1))
        cfg_r = ctx.cfg.reinforce
        fused = fuse_boundaries(level_labels, cfg_r)
        documents = build_documents(fused, level_labels, ctx.cfg.grid, cfg_r)
        fused_lines = [
            json.dumps({"utt": utt, "boundaries": fused[utt]}) for utt in sorted(fused)
        ]
        writer.add_text(f"iter{iteration}/mr{mr_round}/fused.jsonl",
                        "\n".join(fused_lines) + "\n")
        doc_lines = [
            json.dumps({"utt": utt, "start": start, "end": end, "words": words})
            for (utt, start, end), words in zip(documents.spans, documents.docs)
        ]
        writer.add_text(f"iter{iteration}/mr{mr_round}/documents.jsonl",
                        "\n".join(doc_lines) + "\n")
        for n in ctx.cfg.grid.phonetic:
            seed = reinforce.derived_seed(
                stage_seed(ctx.cfg.seed, f"mr/{iteration}/{mr_round}"), n
            )
            model = lda_fit(documents.docs, n, documents.vocab_size, cfg_r, seed)
            writer.add_bytes(f"iter{iteration}/mr{mr_round}/lda_n{n}.matl",
                             reinforce.matl_bytes(model))
            labels = relabel(documents, model)
            writer.add_text(f"iter{iteration}/mr{mr_round}/labels_n{n}.jsonl",
                            labels_to_jsonl(labels))
        return inputs

    _run_stage(ctx, f"iter{iteration}/mr{mr_round}", work)


def _mdnn_inputs(ctx: RunContext, iteration: int):
    """Per-utterance network input: acoustic context, bottleneck context from
    every earlier iteration, then the utterance statistics vector."""
    acoustic, inputs = _load_corpus(ctx, "features")
    radius = ctx.cfg.features.context_radius
    bnf_corpora = []
    for k in range(1, iteration):
        bnf, extra = _load_corpus(ctx, f"iter{k}/bnf")
        bnf_corpora.append(bnf)
        inputs.update(extra)
    rows = {}
    for utt in sorted(acoustic.ids()):
        mfcc_ctx = window_context(acoustic[utt], radius).frames
        blocks = [window_context(c[utt], radius).frames for c in bnf_corpora]
        bnf_ctx = blocks[0] if blocks else None
        extras = tuple(blocks[1:])
        rows[utt] = make_iteration_input(
            mfcc_ctx, bnf_ctx, extras, utterance_stats(acoustic[utt])
        )
    return rows, inputs


def cmd_mdnn(ctx: RunContext, iteration: int = 1):
    def work(writer: StageWriter):
        level_labels, inputs = _load_level_labels(
            ctx, tok_dir(iteration, ctx.cfg.mr_rounds)
        )
        rows, more = _mdnn_inputs(ctx, iteration)
        inputs.update(more)
        targets_by_utt = build_targets(level_labels, ctx.cfg.grid)
        order = sorted(rows)
        X = np.vstack([rows[u] for u in order])
        Y = np.vstack([targets_by_utt[u] for u in order])
        levels = ctx.cfg.grid.levels()
        model, log = train_mdnn(
            X, Y, [g.n for g in levels], levels, ctx.cfg.mdnn,
            seed=stage_seed(ctx.cfg.seed, f"mdnn/{iteration}"),
        )
        writer.add_bytes(
            f"iter{iteration}/BNF-{ordinal(iteration)}_MR-{ctx.cfg.mr_rounds}.matn",
            mdnn.matn_bytes(model),
        )
        writer.add_text(f"iter{iteration}/mdnn_log.csv", log.to_csv())
        return inputs

    _run_stage(ctx, f"iter{iteration}/mdnn", work)


def _mdnn_model_path(ctx: RunContext, iteration: int) -> Path:
    return ctx.out / f"iter{iteration}/BNF-{ordinal(iteration)}_MR-{ctx.cfg.mr_rounds}.matn"


def cmd_extract(ctx: RunContext, iteration: int = 1):
    def work(writer: StageWriter):
        model_path = _require(_mdnn_model_path(ctx, iteration), "trained network")
        inputs = {str(model_path.relative_to(ctx.out)): file_sha256(model_path)}
        model = read_matn(model_path)
        rows, more = _mdnn_inputs(ctx, iteration)
        inputs.update(more)
        acoustic, _ = _load_corpus(ctx, "features")
        sequences = []
        for utt in acoustic.ids():
            bnf = extract_bnf(model, rows[utt])
            sequences.append(FeatureSequence(
                bnf.frames, acoustic[utt].frame_shift, acoustic[utt].frame_length, utt
            ))
        _add_corpus(writer, f"iter{iteration}/bnf", Corpus(sequences, dict(acoustic.speakers)))
        return inputs

    _run_stage(ctx, f"iter{iteration}/extract", work)


def cmd_iterate(ctx: RunContext):
    """init -> MAT -> (MR -> MAT)* -> MDNN -> extract, once per iteration; the
    extracted features feed the next iteration's MAT and the network input."""
    for iteration in range(1, ctx.cfg.iterations + 1):
        cmd_init(ctx, iteration)
        cmd_mat(ctx, iteration, 0)
        for r in range(1, ctx.cfg.mr_rounds + 1):
            cmd_mr(ctx, iteration, r)
            cmd_mat(ctx, iteration, r)
        cmd_mdnn(ctx, iteration)
        cmd_extract(ctx, iteration)


# ---------------------------------------------------------------------------
# retrieval / evaluation / visualization stages
# ---------------------------------------------------------------------------

def _final_tok_dir(ctx: RunContext) -> str:
    return tok_dir(ctx.cfg.iterations, ctx.cfg.mr_rounds)


def _load_models(ctx: RunContext, rel_dir: str):
    models = {}
    inputs = {}
    for g in ctx.cfg.grid.levels():
        path = _require(ctx.out / rel_dir / f"model_m{g.m}_n{g.n}.matm",
                        f"level model {rel_dir} ({g.m},{g.n})")
        inputs[f"{rel_dir}/model_m{g.m}_n{g.n}.matm"] = file_sha256(path)
        models[g] = read_matm(path)
    return models, inputs


def cmd_std(ctx: RunContext):
    """Rank documents for each configured query utterance; queries are held
    out of the document collection."""
    def work(writer: StageWriter):
        queries = ctx.cfg.retrieval.queries
        if not queries:
            raise PipelineError("no queries configured in [retrieval]")
        base = _final_tok_dir(ctx)
        level_labels, inputs = _load_level_labels(ctx, base)
        models, more = _load_models(ctx, base)
        inputs.update(more)
        corpus, feat_inputs = _load_corpus(ctx, features_dir(ctx.cfg.iterations))
        inputs.update(feat_inputs)

        doc_ids = [u for u in corpus.ids() if u not in set(queries)]
        doc_labels = {
            g: {u: level_labels[g][u] for u in doc_ids} for g in level_labels
        }
        index = retrieval.RetrievalIndex.build(
            models, doc_labels,
            Corpus([corpus[u] for u in doc_ids], dict(corpus.speakers)),
        )
        mode = ctx.cfg.retrieval.mode
        weights = list(ctx.cfg.retrieval.weights) or None
        lists = []
        for q in queries:
            if q not in corpus.ids():
                raise PipelineError(f"query utterance {q!r} not in corpus")
            q_tokens = {g: level_labels[g][q].token_ids() for g in level_labels}
            lists.append(retrieval.rank_documents(
                index, q, query_tokens=q_tokens, query_features=corpus[q],
                mode=mode, weights=weights,
            ))
        lines = ["query_id\tdoc_id\trank\tscore"]
        for ranked in lists:
            for rank, (doc, score) in enumerate(ranked.entries, start=1):
                lines.append(f"{ranked.query_id}\t{doc}\t{rank}\t{score!r}")
        writer.add_text("std/rankings.tsv", "\n".join(lines) + "\n")
        return inputs

    _run_stage(ctx, "std", work)


def _load_truth(ctx: RunContext) -> tuple[GroundTruth, dict[str, str]]:
    path = _require(ctx.out / "truth.jsonl", "ground truth (synthetic corpora only)")
    return read_ground_truth(path), {"truth.jsonl": file_sha256(path)}


def cmd_eval(ctx: RunContext):
    """Boundary PRF and purity/NMI per level against the synthetic ground
    truth, plus MAP over the written rankings when a relevance table exists."""
    def work(writer: StageWriter):
        truth, inputs = _load_truth(ctx)
        level_labels, more = _load_level_labels(ctx, _final_tok_dir(ctx))
        inputs.update(more)
        ref_bounds = {utt: truth.boundaries(utt) for utt in truth.spans}
        truth_labels = truth.label_set()
        lines = ["m,n,boundary_p,boundary_r,boundary_f,purity,nmi"]
        for g in ctx.cfg.grid.levels():
            p, r, f = evalviz.corpus_boundary_prf(level_labels[g], ref_bounds)
            hyp, ref = evalviz.frame_label_pairs(level_labels[g], truth_labels)
            purity, nmi = evalviz.cluster_purity_nmi(hyp, ref)
            lines.append(f"{g.m},{g.n},{p!r},{r!r},{f!r},{purity!r},{nmi!r}")
        writer.add_text("eval/levels.csv", "\n".join(lines) + "\n")

        if ctx.cfg.retrieval.relevance:
            rel_path = _require(Path(ctx.cfg.retrieval.relevance), "relevance table")
            inputs[str(rel_path)] = file_sha256(rel_path)
            rank_path = _require(ctx.out / "std/rankings.tsv", "rankings (run std first)")
            inputs["std/rankings.tsv"] = file_sha256(rank_path)
            relevance = retrieval.read_relevance_csv(rel_path)
            lists = _read_rankings(rank_path)
            value = retrieval.mean_average_precision(lists, relevance)
            writer.add_text("eval/map.csv", f"map\n{value!r}\n")
        return inputs

    _run_stage(ctx, "eval", work)


def _read_rankings(path) -> list[retrieval.RankedList]:
    per_query: dict[str, list[tuple[int, str, float]]] = {}
    with open(path) as f:
        next(f)
        for line in f:
            q, doc, rank, score = line.rstrip("\n").split("\t")
            per_query.setdefault(q, []).append((int(rank), doc, float(score)))
    return [
        retrieval.RankedList(q, [(doc, score) for _, doc, score in sorted(rows)])
        for q, rows in per_query.items()
    ]


def cmd_viz(ctx: RunContext):
    """Per-level co-occurrence maps against the true tokens, speaker-token
    intensity maps, and the granularity grid of boundary F-scores."""
    def work(writer: StageWriter):
        truth, inputs = _load_truth(ctx)
        level_labels, more = _load_level_labels(ctx, _final_tok_dir(ctx))
        inputs.update(more)
        corpus, feat_inputs = _load_corpus(ctx, "features")
        inputs.update(feat_inputs)
        reference = {
            utt: [(str(token), start, end) for token, start, end in spans]
            for utt, spans in truth.spans.items()
        }
        ref_bounds = {utt: truth.boundaries(utt) for utt in truth.spans}
        grid_values = {}
        for g in ctx.cfg.grid.levels():
            tag = f"m{g.m}_n{g.n}"
            mat = evalviz.cooccurrence(level_labels[g], reference)
            writer.add_text(f"viz/cooccurrence_{tag}.csv", _cooccurrence_csv(mat))
            peak = mat.counts.max()
            image = mat.counts[mat.grouped_row_order()] / peak if peak else mat.counts
            writer.add_bytes(f"viz/cooccurrence_{tag}.pgm", _pgm_bytes(image))
            if corpus.speakers:
                stm = evalviz.speaker_token_map(level_labels[g], corpus.speakers)
                writer.add_bytes(f"viz/speaker_map_{tag}.pgm", _pgm_bytes(stm.intensities))
                rows = ["speaker," + ",".join(str(t) for t in stm.token_order)]
                for s, spk in enumerate(stm.speakers):
                    rows.append(spk + "," + ",".join(repr(v) for v in stm.intensities[s]))
                writer.add_text(f"viz/speaker_map_{tag}.csv", "\n".join(rows) + "\n")
            _, _, f = evalviz.corpus_boundary_prf(level_labels[g], ref_bounds)
            grid_values[(g.m, g.n)] = f
        writer.add_text("viz/grid_boundary_f.csv", _grid_csv(grid_values))
        return inputs

    _run_stage(ctx, "viz", work)


def _cooccurrence_csv(mat) -> str:
    lines = ["token," + ",".join(str(r) for r in mat.ref_labels)]
    for row in range(len(mat.token_ids)):
        lines.append(
            str(mat.token_ids[row]) + "," + ",".join(str(int(c)) for c in mat.counts[row])
        )
    return "\n".join(lines) + "\n"


def _grid_csv(values: dict[tuple[int, int], float]) -> str:
    arr = np.array([values[k] for k in sorted(values)])
    lines = ["m,n,value"]
    for (m, n) in sorted(values):
        lines.append(f"{m},{n},{values[(m, n)]!r}")
    lines.append(
        f"summary,{arr.mean()!r},{arr.std()!r},{arr.max()!r},{arr.min()!r}"
    )
    return "\n".join(lines) + "\n"


def _pgm_bytes(values: np.ndarray) -> bytes:
    gray = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.tobytes()
