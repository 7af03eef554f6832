"""Offline road labels from bidirectional Viterbi decoding.

The decoder sees a whole drive at once.  Its input trajectory is one of:

``aided``     Kalman filter with online Viterbi road updates, then RTS
              smoothed (default; uses past and future observations and the
              road network, the most accurate offline estimate available)
``smoothed``  GNSS-only Kalman filter, RTS smoothed
``filtered``  GNSS-only Kalman filter means
"""

import numpy as np

from roadkf import kalman as kf
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, field_of_view
from roadkf.selection import EmissionParams, OnlineViterbi, bidirectional_viterbi

SOURCES = ("aided", "smoothed", "filtered")
AIDED_SIGMA = (1.0, 0.0)  # road variances of the aided pass, m^2


def filter_pass(drive, graph=None, sigma=AIDED_SIGMA, p=EmissionParams(), q=kf.ProcessNoise(),
                radius=DEFAULT_FOV_RADIUS, cap=DEFAULT_FOV_CAP):
    """Forward filter keeping what the smoother needs.

    With a graph the road update of online Viterbi is applied each epoch.
    Returns (filtered, predicted, transitions) lists of length T.
    """
    filtered, predicted, transitions = [], [], []
    viterbi = OnlineViterbi(graph, p) if graph is not None else None
    est = None
    aided = False
    for t, ep in enumerate(drive.epochs):
        if est is None:
            est = kf.initialize(ep)
            pred, f = est, np.eye(kf.N_STATE)
        else:
            dt = ep.time - drive.epochs[t - 1].time
            f, _ = kf.transition(dt, q)
            pred = kf.predict(est, dt, q)
            est = kf.gnss_update(pred, ep)
        aided = aided or kf.converged(est.cov)
        if viterbi is not None and aided:
            road = viterbi.step(field_of_view(graph, est.mean, radius, cap), est)
            if road is not None:
                est = kf.road_update(est, kf.build_road_observation(est, graph.segments[road], *sigma))
        filtered.append(est)
        predicted.append(pred)
        transitions.append(f)
    return filtered, predicted, transitions


def oracle_trajectory(drive, graph, source="aided", p=EmissionParams(), q=kf.ProcessNoise()):
    """(T, 8) means fed to the offline decoder."""
    if source not in SOURCES:
        raise ValueError(f"unknown oracle source {source!r}; expected one of {SOURCES}")
    filt, pred, trans = filter_pass(drive, graph if source == "aided" else None, p=p, q=q)
    if source == "filtered":
        return np.array([e.mean for e in filt])
    return np.array([e.mean for e in kf.rts_smooth(filt, pred, trans)])


def label_drive(drive, graph, source="aided", p=EmissionParams(), q=kf.ProcessNoise()):
    """Per-epoch oracle segment ids (-1 where no candidate exists)."""
    return bidirectional_viterbi(oracle_trajectory(drive, graph, source, p, q), graph, p)


def label_accuracy(labels, truth_segments):
    labels = np.asarray(labels)
    return float(np.mean(labels == np.asarray(truth_segments)))
