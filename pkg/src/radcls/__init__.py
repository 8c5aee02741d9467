"""Radiograph tear classification: data model, imaging, model, training, reports.

Submodules import their own heavyweight dependencies, so importing the
package itself stays light; pull in ``radcls.network`` or ``radcls.training``
explicitly when the model is needed.
"""

__version__ = "0.1.0"
