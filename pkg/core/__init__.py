# -*- coding: utf-8 -*-
"""core - model, training, evaluation and experiment logic for rbmreg."""
