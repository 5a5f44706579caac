#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""CSV, JSON and PNG report writers"""

import csv
import json
import logging
import math
import os

from matplotlib.figure import Figure
import numpy as np

logger = logging.getLogger(__name__)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_json(path, data):
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.debug("Wrote %s", path)
    return path


def write_csv(path, rows, fieldnames=None):
    """Rows (dicts) as CSV; columns in first-seen order unless given"""
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(_jsonable(row))
    logger.debug("Wrote %s", path)
    return path


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches='tight')
    logger.debug("Wrote %s", path)
    return path


def plot_lines(path, x, series, xlabel, ylabel, title=None):
    """Line plot of named series sharing the x values"""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for name, values in series.items():
        ax.plot(x, values, marker='o', label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_bars(path, labels, values, ylabel, title=None):
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    ax.bar([str(label) for label in labels], values)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_confusion(path, confusion, title='Confusion matrix'):
    """Heatmap of a C x C confusion matrix with counts in the cells"""
    confusion = np.asarray(confusion)
    fig = Figure(figsize=(4.5, 4))
    ax = fig.subplots()
    image = ax.imshow(confusion, cmap='Blues')
    fig.colorbar(image, ax=ax)
    ax.set_xlabel('predicted')
    ax.set_ylabel('true')
    ax.set_title(title)
    ticks = range(confusion.shape[0])
    ax.set_xticks(ticks)
    ax.set_yticks(ticks)
    half = confusion.max() / 2.0 if confusion.size else 0
    for (i, j), count in np.ndenumerate(confusion):
        ax.text(j, i, str(count), ha='center', va='center',
                color='white' if count > half else 'black')
    return _save(fig, path)


def plot_image_grid(path, rows, column_titles):
    """Grid of H x W x C images, one list per row"""
    n_rows, n_cols = len(rows), len(column_titles)
    fig = Figure(figsize=(1.6 * n_cols, 1.6 * n_rows))
    axes = np.atleast_2d(fig.subplots(n_rows, n_cols, squeeze=False))
    for r, images in enumerate(rows):
        for c, image in enumerate(images):
            ax = axes[r, c]
            ax.imshow(np.clip(image, 0.0, 1.0))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(column_titles[c], fontsize=8)
    return _save(fig, path)


def write_metrics(directory, name, report, emit_plots=True):
    """MetricsReport as JSON, per-class CSV and confusion heatmap"""
    paths = [write_json(os.path.join(directory, f'{name}.json'),
                        report.to_dict())]
    rows = [{'class': c, 'count': int(report.confusion[c].sum()),
             'accuracy': report.per_class_accuracy[c]}
            for c in range(report.confusion.shape[0])]
    paths.append(write_csv(os.path.join(directory, f'{name}.csv'), rows))
    if emit_plots:
        paths.append(plot_confusion(
            os.path.join(directory, f'{name}_confusion.png'), report.confusion,
            title=f'{name} (accuracy {report.accuracy:.3f})'))
    return paths


def write_table(directory, name, rows, summary=None, plot=None,
                emit_plots=True):
    """Experiment table as CSV + JSON, plus a PNG from plot(path, rows)

    :return: list of written paths
    """
    paths = [
        write_csv(os.path.join(directory, f'{name}.csv'), rows),
        write_json(os.path.join(directory, f'{name}.json'),
                   {'rows': rows, 'summary': summary or {}}),
    ]
    if plot is not None and emit_plots and rows:
        paths.append(plot(os.path.join(directory, f'{name}.png'), rows))
    logger.info("Report %s written to %s", name, directory)
    return paths
