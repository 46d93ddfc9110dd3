"""
Histogram Plot
Renders the dwell-time histogram table as a PNG.
"""
import logging
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

FIGSIZE = (8, 4.5)


def plot_dwell_histogram(table: Sequence[Tuple[int, int]], path: str,
                         max_seconds: Optional[int] = 120, title: str = 'Dwell time distribution'):
    """
    Bar chart of (bucket, count) rows, buckets beyond max_seconds left out.

    Raises:
        ValueError: if the table is empty
    """
    rows = [(b, c) for b, c in table if max_seconds is None or b <= max_seconds]
    if not rows:
        raise ValueError("nothing to plot: the dwell histogram is empty")
    buckets, counts = zip(*rows)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    try:
        ax.bar(buckets, counts, width=1.0, color='tab:blue', edgecolor='none')
        ax.set_xlabel('dwell time (s)')
        ax.set_ylabel('clicks')
        ax.set_title(title)
        ax.set_xlim(-0.5, max(buckets) + 0.5)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    logger.info("wrote dwell histogram plot to %s", path)
