#   -*- coding: utf-8 -*-
from pybuilder.core import use_plugin, init

use_plugin("python.core")
use_plugin("python.unittest")
use_plugin("python.coverage")
use_plugin("python.distutils")


name = "mars-ratio"
version = "0.1.0"
default_task = "publish"


@init
def set_properties(project):
    project.depends_on("numpy", ">=1.24")
    project.set_property("distutils_console_scripts", ["mars-ratio = mars_ratio.cli:main"])
    project.set_property("coverage_break_build", False)
