import logging
from dataclasses import asdict
from pathlib import Path

import click
import pandas as pd

from app import cli
from artifacts import canonical_json, read_json, write_atomic, write_json
from classifiers import ModelKind, load_model, save_model
from clustering import assignment_from_json, assignment_to_json
from config import load_config
from errors import DataFormatError, GelidError, UndefinedMetricError
from evalstats import (EXHAUSTIVE_MAX_OBJECTS, Partition, bimodal_likert_std, load_ratings_csv, margin_of_error,
                       mno, mno_exhaustive, mojo_fm, mojo_fm_exhaustive, segmentation_study, simulate_likert_std,
                       simulate_power)
from features import Featurizer, write_feature_csv
from frame_ingest import write_descriptor_csv
from ledger import list_runs, record_classifier
from pipeline import (IssueHierarchy, build_hierarchy, classify_segments, evaluate_context_grid,
                      evaluate_model_grid, featurizer_for, group_contexts, hierarchy_json, ingest_videos,
                      labeled_segments, load_label_table, load_manifest, load_truth_table, predictions_from_json,
                      predictions_to_json, record_failure, record_result, run_pipeline, segment_videos,
                      split_dataset, stage, train_classifier, truth_segments)
from report import export_report
from segmentation import read_segments_jsonl, segment_text, write_segments_jsonl
from subtitle_ingest import write_srt

# Configure logging
logger = logging.getLogger(__name__)

SEGMENTS_FILE = 'segments.jsonl'
PREDICTIONS_FILE = 'predictions.json'
CONTEXTS_FILE = 'contexts.json'
HIERARCHY_FILE = 'hierarchy.json'
MODEL_FILE = 'model.json'
RUN_REPORT_FILE = 'run_report.json'

SEED = click.IntRange(0, 2**64 - 1)


def config_option(f):
    return click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
                        help='Flat section.key = value config file')(f)


def seed_option(f):
    return click.option('--seed', type=SEED, help='Master seed (u64); overrides config and environment')(f)


def manifest_option(f):
    return click.option('--manifest', 'manifest_path', required=True,
                        type=click.Path(exists=True, dir_okay=False, path_type=Path))(f)


def out_option(f):
    return click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False, path_type=Path),
                        help='Output directory')(f)


def _config(config_path, seed=None, seed_required=True, **sections):
    overrides = {key: value for key, value in sections.items() if value}
    if seed is not None:
        overrides.setdefault('pipeline', {})['seed'] = seed
    return load_config(config_path, overrides, seed_required=seed_required)


def _inputs(manifest_path, cfg):
    manifest = load_manifest(manifest_path)
    videos = ingest_videos(manifest, cfg)
    return manifest, videos, {v.video_id: v for v in videos}


def _segments(segments_path, videos, cfg):
    """Segments per video, read from a segments file or computed now"""
    if segments_path is None:
        return segment_videos(videos, cfg)
    grouped = {v.video_id: [] for v in videos}
    for segment in read_segments_jsonl(segments_path):
        if segment.video_id not in grouped:
            raise DataFormatError(f"{segments_path}: segment {segment.segment_id} of unknown video")
        grouped[segment.video_id].append(segment)
    return grouped


def _flat(segments_by_video):
    return [s for segments in segments_by_video.values() for s in segments]


def _echo_json(data):
    click.echo(canonical_json(data), nl=False)


@cli.command()
@config_option
@manifest_option
@out_option
def ingest(config_path, manifest_path, out_dir):
    """Parse subtitles and frames; write normalized SRT and descriptor CSV per video"""
    cfg = _config(config_path, seed_required=False)
    _, videos, _ = _inputs(manifest_path, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for video in videos:
        write_atomic(out_dir / f"{video.video_id}.srt", write_srt(video.transcript))
        with stage('ingest', video.video_id):
            write_descriptor_csv(video.track, out_dir / f"{video.video_id}.frames.csv")
        summary.append({'video_id': video.video_id, 'cues': len(video.transcript.cues),
                        'frames': len(video.track.frames), 'duration_ms': video.track.duration_ms})
    _echo_json({'videos': summary})


@cli.command()
@config_option
@manifest_option
@out_option
@click.option('--k', 'k_seconds', type=click.IntRange(0), help='Reaction shift in seconds')
def segment(config_path, manifest_path, out_dir, k_seconds):
    """Split every video into segments at shifted, sentence-snapped shot transitions"""
    cfg = _config(config_path, seed_required=False,
                  segmenter={'k_seconds': k_seconds} if k_seconds is not None else None)
    _, videos, _ = _inputs(manifest_path, cfg)
    segments = _flat(segment_videos(videos, cfg))
    path = write_atomic(out_dir / SEGMENTS_FILE, write_segments_jsonl(segments))
    _echo_json({'segments': len(segments), 'path': str(path)})


@cli.command()
@config_option
@manifest_option
@out_option
@click.option('--segments', 'segments_path', type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--model', 'model_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Reuse the feature layout stored with a trained model')
def features(config_path, manifest_path, out_dir, segments_path, model_path):
    """Export one feature row per segment"""
    cfg = _config(config_path, seed_required=False)
    _, videos, by_id = _inputs(manifest_path, cfg)
    segments = _flat(_segments(segments_path, videos, cfg))
    texts = [segment_text(s, by_id[s.video_id].transcript) for s in segments]
    if model_path is not None:
        featurizer = featurizer_for(load_model(model_path))
    else:
        featurizer = Featurizer(cfg.features).fit(texts)
    vectors = []
    for segment_, text in zip(segments, texts):
        video = by_id[segment_.video_id]
        with stage('features', segment_.video_id):
            vectors.append(featurizer.transform(segment_, text, video.track, video.transcript))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_feature_csv(vectors, out_dir / 'features.csv')
    _echo_json({'segments': len(vectors), 'features': len(featurizer.names)})


@cli.command()
@config_option
@seed_option
@manifest_option
@out_option
@click.option('--labels', 'labels_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Labelled segments CSV; defaults to the manifest labels')
@click.option('--kind', type=click.Choice([k.value for k in ModelKind]))
def train(config_path, seed, manifest_path, out_dir, labels_path, kind):
    """Train an issue classifier on manually labelled segments"""
    cfg = _config(config_path, seed, model={'kind': kind} if kind else None)
    manifest, videos, by_id = _inputs(manifest_path, cfg)
    labels_path = labels_path or manifest.labels
    if labels_path is None:
        raise click.UsageError('no --labels given and the manifest names none')
    with stage('train'):
        labeled = labeled_segments(load_label_table(labels_path), by_id, cfg)
        model = train_classifier(labeled, by_id, cfg)
    path = save_model(model, out_dir / MODEL_FILE)
    record_classifier(cfg.pipeline.ledger_url, model.kind.value, str(path), len(model.feature_names),
                      model.training_accuracy, model.hyper)
    _echo_json({'model': model.kind.value, 'rows': len(labeled), 'features': len(model.feature_names),
                'training_accuracy': model.training_accuracy, 'path': str(path)})


@cli.command()
@config_option
@manifest_option
@out_option
@click.option('--model', 'model_path', required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--segments', 'segments_path', type=click.Path(exists=True, dir_okay=False, path_type=Path))
def classify(config_path, manifest_path, out_dir, model_path, segments_path):
    """Label every segment with an issue category or NonInformative"""
    cfg = _config(config_path, seed_required=False)
    _, videos, _ = _inputs(manifest_path, cfg)
    segments = _segments(segments_path, videos, cfg)
    predictions = classify_segments(load_model(model_path), videos, segments)
    if segments_path is None:
        write_atomic(out_dir / SEGMENTS_FILE, write_segments_jsonl(_flat(segments)))
    write_json(out_dir / PREDICTIONS_FILE, predictions_to_json(predictions))
    counts = {}
    for prediction in predictions:
        counts[prediction.label.value] = counts.get(prediction.label.value, 0) + 1
    _echo_json({'segments': len(predictions), 'labels': counts})


def _stored_predictions(manifest_path, segments_path, predictions_path, cfg):
    _, videos, by_id = _inputs(manifest_path, cfg)
    segments = _flat(_segments(segments_path, videos, cfg))
    return videos, predictions_from_json(read_json(predictions_path), segments, by_id)


@cli.command()
@config_option
@manifest_option
@out_option
@click.option('--segments', 'segments_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--predictions', 'predictions_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def group(config_path, manifest_path, out_dir, segments_path, predictions_path):
    """Group informative segments into game contexts by keyframe similarity"""
    cfg = _config(config_path, seed_required=False)
    videos, predictions = _stored_predictions(manifest_path, segments_path, predictions_path, cfg)
    contexts = group_contexts(predictions, videos, cfg)
    write_json(out_dir / CONTEXTS_FILE, assignment_to_json(contexts))
    _echo_json({'segments': len(contexts.ids), 'contexts': contexts.n_clusters})


@cli.command()
@config_option
@manifest_option
@out_option
@click.option('--segments', 'segments_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--predictions', 'predictions_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--contexts', 'contexts_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Context grouping from the group command; computed when omitted')
def cluster(config_path, manifest_path, out_dir, segments_path, predictions_path, contexts_path):
    """Cluster segments per context and category and write the issue hierarchy"""
    cfg = _config(config_path, seed_required=False)
    videos, predictions = _stored_predictions(manifest_path, segments_path, predictions_path, cfg)
    contexts = assignment_from_json(read_json(contexts_path)) if contexts_path else None
    hierarchy = build_hierarchy(predictions, videos, cfg, contexts)
    hierarchy.check_conservation()
    write_atomic(out_dir / HIERARCHY_FILE, hierarchy_json(hierarchy))
    _echo_json(hierarchy.to_dict()['summary'])


@cli.command()
@config_option
@seed_option
@manifest_option
@out_option
@click.option('--model', 'model_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Trained model; the manifest labels are used to train one when omitted')
def run(config_path, seed, manifest_path, out_dir, model_path):
    """Run every stage and write the hierarchy, report and intermediate artifacts"""
    cfg = _config(config_path, seed)
    try:
        model = load_model(model_path) if model_path else None
        result = run_pipeline(load_manifest(manifest_path), cfg, model)
    except GelidError as e:
        record_failure(e, cfg)
        raise

    # nothing is written before every stage succeeded
    out_dir.mkdir(parents=True, exist_ok=True)
    segments = [p.segment for p in result.predictions]
    write_atomic(out_dir / SEGMENTS_FILE, write_segments_jsonl(segments))
    write_json(out_dir / PREDICTIONS_FILE, predictions_to_json(result.predictions))
    write_json(out_dir / CONTEXTS_FILE, assignment_to_json(result.contexts))
    if model is None:
        save_model(result.model, out_dir / MODEL_FILE)
    write_atomic(out_dir / HIERARCHY_FILE, hierarchy_json(result.hierarchy))
    if cfg.pipeline.report_format == 'html':
        export_report(result.hierarchy, 'html', out_dir / 'report.html')
    write_json(out_dir / RUN_REPORT_FILE, result.report)
    record_result(result, cfg)
    _echo_json(result.report['counts'])


@cli.command()
@click.option('--hierarchy', 'hierarchy_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--format', 'report_format', type=click.Choice(['json', 'html']), default='html', show_default=True)
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False, path_type=Path))
def report(hierarchy_path, report_format, out_path):
    """Render a hierarchy as canonical JSON or a static HTML page"""
    hierarchy = IssueHierarchy.from_dict(read_json(hierarchy_path))
    export_report(hierarchy, report_format, out_path)


@cli.command()
@click.option('--ledger', 'ledger_url', help='Ledger database URL; defaults to the configured one')
@click.option('--limit', default=20, show_default=True, type=click.IntRange(1))
@config_option
def runs(ledger_url, limit, config_path):
    """List recorded pipeline runs"""
    url = ledger_url or _config(config_path, seed_required=False).pipeline.ledger_url
    if not url:
        raise click.UsageError('no ledger configured; set pipeline.ledger_url or pass --ledger')
    _echo_json(list_runs(url, limit))


# Evaluation harness

@cli.group(name="eval")
def eval_group():
    """Statistics and evaluation harness"""


@eval_group.command()
@click.option('--n', 'sizes', multiple=True, type=click.IntRange(1), default=(1000,), show_default=True)
@click.option('--confidence', default=0.95, show_default=True, type=click.FloatRange(0, 1, min_open=True,
                                                                                      max_open=True))
def margin(sizes, confidence):
    """Worst-case margin of error for sample sizes"""
    _echo_json([{'n': n, 'confidence': confidence, 'margin': margin_of_error(n, confidence)} for n in sizes])


@eval_group.command()
@click.option('--sims', default=1000, show_default=True, type=click.IntRange(1))
@click.option('--group-size', default=200, show_default=True, type=click.IntRange(2))
@click.option('--seed', default=0, show_default=True, type=SEED)
def likert(sims, group_size, seed):
    """Spread of standard deviations of random 1-5 ratings, and the bimodal worst case"""
    simulation = simulate_likert_std(sims, group_size, seed)
    bimodal = bimodal_likert_std(group_size) if group_size % 2 == 0 else None
    _echo_json({'simulation': asdict(simulation), 'bimodal_std': bimodal, 'group_size': group_size})


@eval_group.command()
@click.option('--group-size', default=200, show_default=True, type=click.IntRange(2))
@click.option('--shift', default=0.5, show_default=True, type=float)
@click.option('--sd', 'sds', multiple=True, type=click.FloatRange(0, min_open=True), default=(1.28, 1.54, 2.0),
              show_default=True)
@click.option('--alpha', default=0.05, show_default=True, type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option('--sims', default=10000, show_default=True, type=click.IntRange(1))
@click.option('--seed', default=0, show_default=True, type=SEED)
@click.option('--test', type=click.Choice(['t', 'mann_whitney']), default='t', show_default=True)
@click.option('--workers', default=1, show_default=True, type=click.IntRange(1))
def power(group_size, shift, sds, alpha, sims, seed, test, workers):
    """Monte-Carlo power of a two-group comparison"""
    _echo_json([
        {'sd': sd, 'group_size': group_size, 'shift': shift, 'alpha': alpha, 'test': test,
         'power': simulate_power(group_size, shift, sd, alpha, sims, seed, test, n_jobs=workers)}
        for sd in sds
    ])


def _read_partition(path) -> Partition:
    table = pd.read_csv(path, dtype=str)
    if list(table.columns[:2]) != ['object', 'group']:
        raise DataFormatError(f"{path}: expected columns object,group")
    if table['object'].duplicated().any():
        raise DataFormatError(f"{path}: an object is listed twice")
    return Partition(dict(zip(table['object'], table['group'])))


@eval_group.command()
@click.option('--produced', 'produced_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--truth', 'truth_path', required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option('--oracle', is_flag=True, help='Also compute the exhaustive-enumeration values (small inputs only)')
def mojofm(produced_path, truth_path, oracle):
    """MoJoFM of a produced partition against a reference (CSV columns object,group)"""
    produced = _read_partition(produced_path)
    truth = _read_partition(truth_path)
    result = {'n': truth.n, 'mno': mno(produced, truth), 'mojofm': mojo_fm(produced, truth)}
    if oracle:
        if truth.n > EXHAUSTIVE_MAX_OBJECTS:
            raise UndefinedMetricError(f"oracle limited to {EXHAUSTIVE_MAX_OBJECTS} objects, got {truth.n}")
        result['oracle'] = {'mno': mno_exhaustive(produced, truth), 'mojofm': mojo_fm_exhaustive(produced, truth)}
    _echo_json(result)


@eval_group.command()
@click.option('--ratings', 'ratings_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def segments(ratings_path):
    """Interpretability and atomicity study over segmentation variants"""
    _echo_json(segmentation_study(load_ratings_csv(ratings_path)))


@eval_group.command()
@config_option
@seed_option
@manifest_option
@click.option('--labels', 'labels_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='Training segments; defaults to the manifest labels')
@click.option('--test-labels', 'test_path', required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
def models(config_path, seed, manifest_path, labels_path, test_path):
    """Every model kind on every feature variant, scored on the evaluation and test splits"""
    cfg = _config(config_path, seed)
    manifest, _, by_id = _inputs(manifest_path, cfg)
    labels_path = labels_path or manifest.labels
    if labels_path is None:
        raise click.UsageError('no --labels given and the manifest names none')
    training = labeled_segments(load_label_table(labels_path), by_id, cfg)
    held_out = labeled_segments(load_label_table(test_path), by_id, cfg)
    evaluation, test = split_dataset(held_out, [item.label for item in held_out], cfg.pipeline.fractions,
                                     cfg.pipeline.seed)
    _echo_json({
        'sizes': {'training': len(training), 'evaluation': len(evaluation), 'test': len(test)},
        'evaluation': evaluate_model_grid(training, evaluation, by_id, cfg) if evaluation else [],
        'test': evaluate_model_grid(training, test, by_id, cfg) if test else [],
    })


@eval_group.command()
@config_option
@manifest_option
@click.option('--truth', 'truth_path', required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help='CSV video_id,start_ms,end_ms,context')
def clusters(config_path, manifest_path, truth_path):
    """Context grouping of each algorithm scored with MoJoFM against a reference grouping"""
    cfg = _config(config_path, seed_required=False)
    _, _, by_id = _inputs(manifest_path, cfg)
    segments_, truth = truth_segments(load_truth_table(truth_path), by_id, cfg)
    _echo_json(evaluate_context_grid(segments_, by_id, truth, cfg.context))
