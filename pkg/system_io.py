"""
System, HMM-mixture and dataset file formats
Systems and HMM mixtures are TOML documents; datasets are CSV tables
"""
import sys
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd
import tomli_w
from loguru import logger

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from concept_mixture import (CovariateLaw, ExpertParams, GatingKind, GatingParams,
                             LatentConceptSystem, SourceDataset, TargetDataset)
from errors import ValidationError
from hmm_lab import EmissionParams, HMMMixture, HMMParams

PathLike = Union[str, Path]
EXPERT_SECTIONS = ('strong', 'weak_p', 'weak_q')


def _read_toml(path: PathLike) -> Dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: invalid TOML ({exc})") from exc


def _section(doc: Dict, *keys: str) -> Dict:
    node = doc
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            raise ValidationError(f"missing section [{'.'.join(keys)}]")
        node = node[key]
    return node


def system_from_dict(doc: Dict) -> LatentConceptSystem:
    """Build a system from the parsed [system]/[gating]/[experts.*] layout"""
    sys_sec = _section(doc, 'system')
    gating_sec = _section(doc, 'gating')
    try:
        K = int(sys_sec['K'])
        x_dim = int(sys_sec['x_dim'])
        kind = GatingKind(gating_sec.get('kind', 'constant'))
        eta = gating_sec.get('eta', np.zeros((K, x_dim)).tolist())
        gating = GatingParams(eta=eta, kind=kind, variance=float(gating_sec.get('variance', 1.0)))
        experts = {}
        for name in EXPERT_SECTIONS:
            sec = _section(doc, 'experts', name)
            experts[name] = ExpertParams(beta=sec['beta'], noise_sd=float(sec['noise_sd']))
        law_sec = sys_sec.get('x_law')
        x_law = CovariateLaw(law_sec['mean'], law_sec['scale']) if law_sec else CovariateLaw.standard(x_dim)
        system = LatentConceptSystem(
            gating=gating,
            pi_p=sys_sec['pi_p'],
            pi_q=sys_sec['pi_q'],
            x_law=x_law,
            **experts,
        )
    except KeyError as exc:
        raise ValidationError(f"missing key {exc}") from exc
    if system.K != K or system.x_dim != x_dim:
        raise ValidationError(f"declared K={K}, x_dim={x_dim} disagree with parameter shapes "
                              f"({system.K}, {system.x_dim})")
    return system


def system_to_dict(system: LatentConceptSystem) -> Dict:
    doc = {
        'system': {
            'K': system.K,
            'x_dim': system.x_dim,
            'pi_p': system.pi_p.tolist(),
            'pi_q': system.pi_q.tolist(),
            'x_law': {'mean': system.x_law.mean.tolist(), 'scale': system.x_law.scale.tolist()},
        },
        'gating': {
            'kind': system.gating.kind.value,
            'variance': float(system.gating.variance),
            'eta': system.gating.eta.tolist(),
        },
        'experts': {},
    }
    for name in EXPERT_SECTIONS:
        experts = getattr(system, name)
        doc['experts'][name] = {'beta': experts.beta.tolist(), 'noise_sd': experts.noise_sd}
    return doc


def load_system(path: PathLike) -> LatentConceptSystem:
    system = system_from_dict(_read_toml(path))
    logger.info(f"Loaded system K={system.K}, x_dim={system.x_dim} from {path}")
    return system


def save_system(system: LatentConceptSystem, path: PathLike) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        tomli_w.dump(system_to_dict(system), f)
    return str(path)


def load_hmm_mixtures(path: PathLike) -> Dict[str, HMMMixture]:
    """
    Read the [hmm] document: shared emission matrices plus named mixtures

    Returns:
        Mixtures keyed by their `name` entry, in file order
    """
    hmm = _section(_read_toml(path), 'hmm')
    try:
        emission_x = EmissionParams(hmm['emission_x'])
        emission_y = EmissionParams(hmm.get('emission_y', hmm['emission_x']))
        declared = (int(hmm['n_states']), int(hmm['n_tokens']))
        mixtures: Dict[str, HMMMixture] = {}
        for i, entry in enumerate(hmm['mixtures']):
            components: List[HMMParams] = [
                HMMParams(c['transition'], c.get('start')) for c in entry['components']
            ]
            name = entry.get('name', f"mixture_{i}")
            mixtures[name] = HMMMixture(components, entry['pi'], emission_x, emission_y)
    except KeyError as exc:
        raise ValidationError(f"[hmm] is missing key {exc}") from exc
    for name, mix in mixtures.items():
        if (mix.n_states, mix.n_tokens) != declared:
            raise ValidationError(f"mixture {name} has shape {(mix.n_states, mix.n_tokens)}, "
                                  f"declared {declared}")
    if not mixtures:
        raise ValidationError("[hmm] declares no mixtures")
    return mixtures


def _x_columns(d: int) -> List[str]:
    return [f"x_{j}" for j in range(d)]


def save_dataset(data: Union[SourceDataset, TargetDataset], path: PathLike) -> str:
    """Write x_0..x_{d-1}[,y],y_weak with round-trip float precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(data.x, columns=_x_columns(data.x.shape[1]))
    if isinstance(data, SourceDataset):
        frame['y'] = data.y
    frame['y_weak'] = data.y_weak
    frame.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    return str(path)


def load_dataset(path: PathLike, seed: int = None) -> Union[SourceDataset, TargetDataset]:
    """Read a dataset CSV; the presence of a `y` column marks a source dataset"""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"dataset not found: {path}")
    frame = pd.read_csv(path)
    x_cols = [c for c in frame.columns if c.startswith('x_')]
    if not x_cols or x_cols != _x_columns(len(x_cols)) or 'y_weak' not in frame:
        raise ValidationError(f"{path}: header must be x_0..x_(d-1)[,y],y_weak, got {list(frame.columns)}")
    if frame.empty:
        raise ValidationError(f"{path}: dataset is empty")
    values = frame.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{path}: non-finite values")
    x = frame[x_cols].to_numpy(dtype=float)
    if 'y' in frame:
        return SourceDataset(x=x, y=frame['y'].to_numpy(dtype=float),
                             y_weak=frame['y_weak'].to_numpy(dtype=float), seed=seed)
    return TargetDataset(x=x, y_weak=frame['y_weak'].to_numpy(dtype=float), seed=seed)
