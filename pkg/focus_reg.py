#!/usr/bin/env python3
"""
FocusReg - Recalage multi-instances de nuages de points
Focalisation multi-objets (offsets → DBSCAN → propositions) puis appariement
par instance à double masque, avec génération de scènes, évaluation,
vérification des pertes et rapports.
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

# Un seul thread natif: sorties reproductibles au bit près
os.environ.setdefault('OMP_NUM_THREADS', '1')
os.environ.setdefault('OPENBLAS_NUM_THREADS', '1')
os.environ.setdefault('MKL_NUM_THREADS', '1')

from pydantic import ValidationError

from config import RunConfig, available_profiles, build_config
from descriptors import make_provider
from eval_harness import evaluate_runs, write_report_csv, write_report_json
from focusing import MultiObjectFocuser, load_focus_heads, random_focus_heads, save_proposals
from losses import CircleLossParams, run_loss_checks
from matching import InstanceMatcher, load_match_heads, random_match_heads
from persist_runs import (
    RUNS_FILE,
    RunFileError,
    load_records,
    load_run_meta,
    meta_path,
    record_from_registration,
    save_records,
    save_run_meta,
)
from ply_io import read_ply, write_ply
from report import get_curve_summary, load_scene_rows, occlusion_curve, save_curve
from scene_sim import build_scenes, emit_manifest, load_manifest, resolve_model

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2

logger = logging.getLogger('focus_reg')


def parse_instances(text: str):
    """'12' ou '4-16'."""
    if '-' in text:
        lo, hi = text.split('-', 1)
        return [int(lo), int(hi)]
    return int(text)


def _banner(title: str, rows: List[Tuple[str, object]]):
    print("=" * 60)
    print(f"FocusReg - {title}")
    print("=" * 60)
    width = max((len(name) for name, _ in rows), default=0) + 2
    for name, value in rows:
        print(f"{(name + ':').ljust(width)}{value}")
    print("=" * 60)


def _config_from_args(args, flags: Optional[Dict] = None, config_file: Optional[str] = None) -> RunConfig:
    flags = dict(flags or {})
    if getattr(args, 'seed', None) is not None:
        flags['seed'] = args.seed
    if getattr(args, 'threads', None) is not None:
        flags['threads'] = args.threads
    return build_config(args.profile, args.config or config_file, flags, args.set or [])


def scene_files(directory: Path) -> List[Tuple[Path, Path]]:
    """Couples (scene_XXXX.ply, scene_XXXX.json) d'un dossier produit par gen."""
    pairs = []
    for ply in sorted(directory.glob('scene_*.ply')):
        pairs.append((ply, ply.with_suffix('.json')))
    return pairs


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    scene_flags = {}
    if args.instances is not None:
        scene_flags['instances'] = parse_instances(args.instances)
    if args.occlusion is not None:
        scene_flags['occlusion'] = args.occlusion
    if args.noise is not None:
        scene_flags['noise'] = args.noise
    if args.clutter is not None:
        scene_flags['clutter_fraction'] = args.clutter
    cfg = _config_from_args(args, {'scene': scene_flags})
    spec = cfg.scene.model_copy(update={'seed': cfg.seed})
    out = Path(args.out)

    _banner("Génération de scènes", [
        ("Profil", cfg.profile),
        ("Modèle", spec.model),
        ("Instances", f"{spec.instances[0]}-{spec.instances[1]}"),
        ("Occlusion", f"{spec.occlusion[0]}-{spec.occlusion[1]}"),
        ("Fouillis", f"{spec.clutter_fraction} ({spec.clutter_kind})"),
        ("Bruit", f"{spec.noise} m"),
        ("Scènes", args.scenes),
        ("Graine", cfg.seed),
        ("Sortie", out),
    ])

    model = resolve_model(spec.model, spec.model_points)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / 'model.ply', model, binary=not args.ascii, precision='float64')
    for cloud, truth in build_scenes(spec, args.scenes, model, cfg.threads):
        write_ply(out / f'{truth.scene_id}.ply', cloud, binary=not args.ascii, precision='float64',
                  comment=f'focusreg {truth.scene_id} seed {truth.seed}')
        emit_manifest(truth, out / f'{truth.scene_id}.json')
        print(f"✅ {truth.scene_id}: K={len(truth)}, {len(cloud)} points, graine {truth.seed}")
    with open(out / 'gen.config.json', 'w') as f:
        json.dump({'config': cfg.echo()}, f, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

class RegistrationRun:
    """Pipeline complet sur une scène: descripteurs → focalisation → appariement par instance."""

    def __init__(self, cfg: RunConfig, model, dump_dir: Optional[Path] = None):
        self.cfg = cfg
        self.model = model
        self.dump_dir = dump_dir
        self.provider = make_provider(cfg.descriptor, cfg.seed, default_radius=4.0 * cfg.voxel)
        width = self.provider.width

        self.focus_heads = None
        if cfg.focus.mode == 'heads':
            self.focus_heads = (load_focus_heads(cfg.focus.heads_path) if cfg.focus.heads_path
                                else random_focus_heads(width, cfg.focus.geodesic_width, cfg.seed))
        self.match_heads = None
        if cfg.match.mask_mode == 'heads':
            self.match_heads = (load_match_heads(cfg.match.heads_path) if cfg.match.heads_path
                                else random_match_heads(width, cfg.match.geodesic_width, cfg.seed))

    @property
    def needs_manifest(self) -> bool:
        return (self.provider.needs_ground_truth or self.cfg.focus.mode in ('oracle', 'gt-centers')
                or self.cfg.match.mask_mode == 'oracle')

    def process(self, scene_id: str, scene, truth=None):
        cfg = self.cfg
        if truth is None and self.needs_manifest:
            raise ValueError(f"{scene_id}: manifeste requis (fournisseur ou mode oracle)")
        poses = truth.poses if truth is not None else None
        centroids = truth.centroids if truth is not None else None

        scene_fm, model_fm = self.provider.features(scene, self.model, poses)
        focuser = MultiObjectFocuser(self.model, cfg.voxel, cfg.focus, self.provider, self.focus_heads, cfg.seed)
        focus = focuser.process(scene, centroids, poses)
        for message in focus.diagnostics:
            logger.warning("%s: %s", scene_id, message)
        if self.dump_dir is not None:
            save_proposals(self.dump_dir, scene_id, focus.proposals)

        matcher = InstanceMatcher(self.model, model_fm, cfg.voxel, cfg.match, self.provider, self.match_heads)
        registrations = matcher.register_scene(focus.proposals, scene_fm, centroids, cfg.threads)
        by_id = {p.id: p for p in focus.proposals}
        return [record_from_registration(scene_id, by_id[r.proposal_id], r) for r in registrations]


def _register_inputs(args) -> Tuple[List[Tuple[Path, Optional[Path]]], Path, Path]:
    target = Path(args.scene)
    if target.is_dir():
        pairs = [(ply, js if js.exists() else None) for ply, js in scene_files(target)]
        if not pairs:
            raise ValueError(f"Aucune scène scene_*.ply dans {target}")
        model = Path(args.model) if args.model else target / 'model.ply'
        out = Path(args.out) if args.out else target / RUNS_FILE
    else:
        if not target.exists():
            raise ValueError(f"Le fichier '{target}' n'existe pas")
        manifest = Path(args.manifest) if args.manifest else target.with_suffix('.json')
        pairs = [(target, manifest if manifest.exists() else None)]
        if not args.model:
            raise ValueError("--model est requis pour une scène isolée")
        model = Path(args.model)
        out = Path(args.out) if args.out else target.parent / RUNS_FILE
    if not model.exists():
        raise ValueError(f"Le modèle '{model}' n'existe pas")
    return pairs, model, out


def cmd_register(args) -> int:
    flags: Dict = {'descriptor': {}, 'focus': {}, 'match': {}}
    if args.descriptor:
        flags['descriptor']['kind'] = args.descriptor
    if args.sigma_f is not None:
        flags['descriptor']['sigma_f'] = args.sigma_f
    if args.focus_mode:
        flags['focus']['mode'] = args.focus_mode
    if args.mask_mode:
        flags['match']['mask_mode'] = args.mask_mode
    if args.no_instance_mask:
        flags['match']['use_instance_mask'] = False
    if args.no_overlap_mask:
        flags['match']['use_overlap_mask'] = False

    pairs, model_path, out = _register_inputs(args)
    cfg = _config_from_args(args, flags)

    _banner("Recalage multi-instances", [
        ("Scènes", len(pairs)),
        ("Modèle", model_path),
        ("Profil", cfg.profile),
        ("Voxel", f"{cfg.voxel} m"),
        ("Descripteurs", f"{cfg.descriptor.kind} (σ_f={cfg.descriptor.sigma_f})"),
        ("Focalisation", cfg.focus.mode),
        ("Masques", f"{cfg.match.mask_mode} (instance={cfg.match.use_instance_mask}, "
                    f"recouvrement={cfg.match.use_overlap_mask})"),
        ("Threads", cfg.threads),
        ("Sortie", out),
    ])

    started = datetime.now()
    t0 = time.perf_counter()
    model = read_ply(model_path)
    run = RegistrationRun(cfg, model, Path(args.dump_proposals) if args.dump_proposals else None)

    records = []
    scenes_meta = []
    for scene_path, manifest_path in pairs:
        scene = read_ply(scene_path)
        truth = load_manifest(manifest_path) if manifest_path is not None else None
        scene_id = truth.scene_id if truth is not None else scene_path.stem
        scene_records = run.process(scene_id, scene, truth)
        failed = sum(r.failed for r in scene_records)
        status = "✅" if failed == 0 else "⚠️"
        print(f"{status} {scene_id}: {len(scene_records)} proposition(s), {failed} échec(s)")
        records.extend(scene_records)
        scenes_meta.append({
            'scene_id': scene_id,
            'scene': str(scene_path),
            'manifest': None if manifest_path is None else str(manifest_path),
        })

    save_records(out, records)
    save_run_meta(meta_path(out), {
        'model': str(model_path),
        'scenes': scenes_meta,
        'config': cfg.echo(),
        'seed': cfg.seed,
        'records': len(records),
        'started_at': started,
        'wall_time_s': round(time.perf_counter() - t0, 3),
    })
    print(f"\n{len(records)} enregistrement(s) écrits dans: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def cmd_eval(args) -> int:
    runs = Path(args.registrations)
    if runs.is_dir():
        runs = runs / RUNS_FILE
    meta = load_run_meta(meta_path(runs))
    if not meta:
        raise ValueError(f"Métadonnées du run introuvables: {meta_path(runs)}")
    config_file = None if args.config else str(meta_path(runs))
    cfg = _config_from_args(args, config_file=config_file)
    thr = cfg.metric_thresholds()

    records = load_records(runs)
    model = read_ply(meta['model'])
    truths, scenes = {}, {}
    for entry in meta['scenes']:
        if entry.get('manifest') is None:
            raise ValueError(f"{entry['scene_id']}: pas de manifeste, évaluation impossible")
        truth = load_manifest(entry['manifest'])
        truths[truth.scene_id] = truth
        scenes[truth.scene_id] = read_ply(entry['scene'])

    report = evaluate_runs(records, truths, scenes, model, thr)
    out = Path(args.out) if args.out else runs.with_name('report')
    write_report_json(report, out.with_suffix('.json'))
    write_report_csv(report, out.with_suffix('.csv'))

    summary = report.summary
    print("=" * 60)
    print(f"Scènes:       {len(report.scenes)} ({report.aggregation})")
    print(f"RTE max:      {thr.rte_max:.4g} m   RRE max: {thr.rre_max}°")
    print(f"MR:           {_fmt(summary.get('MR'))}")
    print(f"MP:           {_fmt(summary.get('MP'))}")
    print(f"MF:           {_fmt(summary.get('MF'))}")
    print(f"PIR:          {_fmt(summary.get('PIR'))}")
    print(f"Centres MR/MP/RMSE: {_fmt(summary.get('center_MR'))} / {_fmt(summary.get('center_MP'))} / "
          f"{_fmt(summary.get('center_RMSE'))}")
    print("=" * 60)
    for message in report.diagnostics:
        print(f"⚠️  {message}")
    print(f"\nRapport: {out.with_suffix('.json')} / {out.with_suffix('.csv')}")

    if args.fail_under is not None:
        mr = summary.get('MR')
        if mr is None or mr < args.fail_under:
            print(f"❌ MR {_fmt(mr)} < {args.fail_under}", file=sys.stderr)
            return EXIT_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-losses
# ---------------------------------------------------------------------------

def cmd_check_losses(args) -> int:
    params = CircleLossParams(delta_p=args.delta_p, delta_n=args.delta_n, gamma=args.gamma,
                              clamp_weights=args.clamp_weights)
    rows = run_loss_checks(params, seed=args.seed)
    failed = [r for r in rows if not r.passed]

    if args.json:
        print(json.dumps({
            'params': params.model_dump(),
            'rows': [r.as_dict() for r in rows],
            'passed': not failed,
        }, indent=2))
    else:
        print("=" * 78)
        print(f"{'perte':38s} {'valeur':>11s} {'attendu':>11s} {'err. grad':>10s}  ok")
        print("=" * 78)
        for r in rows:
            grad = '' if r.grad_err is None else f"{r.grad_err:.2e}"
            mark = "✅" if r.passed else "❌"
            print(f"{r.name:38s} {r.value:11.6g} {r.expected:11.6g} {grad:>10s}  {mark} {r.note}")
        print("=" * 78)
        print(f"{len(rows) - len(failed)}/{len(rows)} vérifications réussies")
    if failed:
        for r in failed:
            print(f"❌ {r.name}: {r.value!r} (attendu {r.expected!r})", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    rows = load_scene_rows(args.reports)
    curve = occlusion_curve(rows, args.bin_width)
    save_curve(curve, args.out)
    summary = get_curve_summary(curve)
    print(f"✅ {summary['points']} point(s) de courbe, {summary['scenes']} scène(s) → {args.out}")
    for name, value in summary['means'].items():
        print(f"   {name}: {_fmt(value)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# main
# ---------------------------------------------------------------------------

def _add_config_options(parser):
    parser.add_argument('--profile', help=f"Profil de jeu de données ({', '.join(available_profiles())}; défaut: scan2cad-like)")
    parser.add_argument('--config', help='Fichier TOML (ou métadonnées JSON d\'un run à rejouer)')
    parser.add_argument('--set', action='append', metavar='SECTION.CLE=VALEUR',
                        help='Surcharge ponctuelle, prioritaire sur tout le reste (répétable)')
    parser.add_argument('--seed', type=int, help='Graine du run')
    parser.add_argument('--threads', type=int, help='Threads de travail (défaut: nombre de cœurs)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="FocusReg - Recalage multi-instances de nuages de points",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Exemples:
  %(prog)s gen --profile robi-like --instances 12 --occlusion 0.5 --seed 7 --out data/
  %(prog)s register data/ --descriptor oracle --threads 4
  %(prog)s eval data/registrations.jsonl --fail-under 0.9
  %(prog)s check-losses --json
  %(prog)s report occ0/report.csv occ5/report.csv --out curve.dat
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Journalisation détaillée')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Générer des scènes synthétiques')
    _add_config_options(gen)
    gen.add_argument('--out', required=True, help='Dossier de sortie')
    gen.add_argument('--instances', help="Nombre d'instances, ou intervalle '4-16'")
    gen.add_argument('--occlusion', type=float, help='Fraction occultée par instance, dans [0, 1)')
    gen.add_argument('--noise', type=float, help='Bruit gaussien σ en mètres')
    gen.add_argument('--clutter', type=float, help='Fouillis, en fraction des points d\'instances')
    gen.add_argument('--scenes', type=int, default=1, help='Nombre de scènes (défaut: 1)')
    gen.add_argument('--ascii', action='store_true', help='PLY ascii au lieu de binaire')
    gen.set_defaults(handler=cmd_gen)

    reg = sub.add_parser('register', help='Recaler le modèle sur chaque instance')
    _add_config_options(reg)
    reg.add_argument('scene', help='Scène PLY ou dossier produit par gen')
    reg.add_argument('--model', help='Modèle PLY (défaut: <dossier>/model.ply)')
    reg.add_argument('--manifest', help='Manifeste de la scène (défaut: même nom en .json)')
    reg.add_argument('--out', help='Fichier JSONL de sortie (défaut: registrations.jsonl)')
    reg.add_argument('--descriptor', choices=['oracle', 'covariance', 'attention-enhanced'])
    reg.add_argument('--sigma-f', type=float, help='Bruit des descripteurs oracle')
    reg.add_argument('--focus-mode', choices=['oracle', 'heads', 'gt-centers'])
    reg.add_argument('--mask-mode', choices=['oracle', 'heads', 'none'])
    reg.add_argument('--no-instance-mask', action='store_true', help='Désactiver le masque d\'instance')
    reg.add_argument('--no-overlap-mask', action='store_true', help='Désactiver le masque de recouvrement')
    reg.add_argument('--dump-proposals', metavar='DOSSIER', help='Écrire les propositions (JSON + PLY) pour le débogage')
    reg.set_defaults(handler=cmd_register)

    ev = sub.add_parser('eval', help='Évaluer des recalages contre la vérité terrain')
    _add_config_options(ev)
    ev.add_argument('registrations', help='registrations.jsonl ou son dossier')
    ev.add_argument('--out', help='Préfixe du rapport (défaut: report.json / report.csv)')
    ev.add_argument('--fail-under', type=float, help='Code 1 si le MR agrégé est inférieur')
    ev.set_defaults(handler=cmd_eval)

    cl = sub.add_parser('check-losses', help='Vérifier les fonctions de perte')
    cl.add_argument('--gamma', type=float, default=10.0, help='Échelle γ (défaut: 10)')
    cl.add_argument('--delta-p', type=float, default=0.1, help='Marge positive (défaut: 0.1)')
    cl.add_argument('--delta-n', type=float, default=1.4, help='Marge négative (défaut: 1.4)')
    cl.add_argument('--clamp-weights', action='store_true', help='β bornés à zéro')
    cl.add_argument('--seed', type=int, default=0)
    cl.add_argument('--json', action='store_true', help='Sortie JSON')
    cl.set_defaults(handler=cmd_check_losses)

    rp = sub.add_parser('report', help='Courbes MR/MP/MF en fonction de l\'occlusion (gnuplot)')
    rp.add_argument('reports', nargs='+', help='Rapports CSV produits par eval')
    rp.add_argument('--out', required=True, help='Fichier .dat de sortie')
    rp.add_argument('--bin-width', type=float, default=0.05, help='Largeur des classes (défaut: 0.05)')
    rp.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format='%(levelname)s %(name)s: %(message)s',
    )
    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"❌ Configuration invalide:\n{e}", file=sys.stderr)
        return EXIT_INPUT
    except RunFileError as e:
        print(f"❌ Erreur: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as e:
        print(f"❌ Erreur: {e}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("\nInterrompu", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
