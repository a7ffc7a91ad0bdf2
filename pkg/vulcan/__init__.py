"""
Vulcan is a deterministic multi-agent exploration simulator for indoor fire
scenes.  It simulates smoke and heat, degrades the robots' sensors, fuses what
they see into a hazard-annotated map, and plans frontier exploration with
hazard-aware Fast Marching.

Syntax: vulcan {gen-scenes,run,report,render} [options]

Copyright (c) 2026 The Vulcan developers

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files, to deal in the software
without restriction, subject to the conditions of the MIT licence.
"""

__version__ = '0.3.0.dev0'
__author__ = 'Vulcan developers <vulcan-dev@example.org>'
__licence__ = 'MIT'
__url__ = 'https://github.com/vulcan-dr/vulcan'
