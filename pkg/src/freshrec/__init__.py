"""freshrec: personalized new-release carousels.

Pipeline pieces, bottom-up:

* :mod:`freshrec.catalog` -- albums, usage events, the 7-day release window.
* :mod:`freshrec.cf_trainer` -- weekly interaction matrix and truncated SVD embeddings.
* :mod:`freshrec.coldstart` -- MLP predicting CF embeddings for fresh albums.
* :mod:`freshrec.vector_index` -- dot-product top-k retrieval (exact or IVF).
* :mod:`freshrec.bandit` -- Gaussian Thompson sampling with cascade feedback.
* :mod:`freshrec.slate_service` -- carousel assembly, feedback, refresh scheduler.
* :mod:`freshrec.simulator` -- synthetic world and A/B harness.
"""

__version__ = "0.1.0"

DAY = 86_400
HOUR = 3_600
WEEK = 7 * DAY
