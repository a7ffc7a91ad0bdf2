#!/usr/bin/python

import doctest
import glob
import logging
import os
import shutil
import sys
import tempfile
import unittest


DOCTEST_MODULES = (
    'vulcan.config',
    'vulcan.world',
    'vulcan.perception',
    'vulcan.mapping',
)


class RedirectToStdout(object):
    """A file-like object that prints to sys.stdout

    A reason to use sys.stderr = RedirectToStdout() instead of assigning
    sys.stderr = sys.stdout is when sys.stdout is later reassigned to a
    different object (e.g. the StringIO that doctests use) and you want
    sys.stderr to always refer to whatever sys.stdout is printing to.

    Not all file methods are implemented, just the ones that were actually
    needed.
    """

    def write(self, msg):
        sys.stdout.write(msg)

    def flush(self):
        pass


def setUp(test):
    test.old_stderr = sys.stderr
    sys.stderr = RedirectToStdout()
    test.old_cwd = os.getcwd()
    test.old_environ = dict(os.environ)
    for name in list(os.environ):
        if name.startswith('VULCAN_'):
            del os.environ[name]
    test.tempdir = tempfile.mkdtemp(prefix='test-vulcan-')
    os.chdir(test.tempdir)


def tearDown(test):
    sys.stderr = test.old_stderr
    os.chdir(test.old_cwd)
    os.environ.clear()
    os.environ.update(test.old_environ)
    shutil.rmtree(test.tempdir)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)


def additional_tests():  # hook for setuptools setup.py test
    # paths relative to __file__ don't work if you run 'figleaf testsuite.py'
    # so we have to use paths relative to os.getcwd()
    doctests = sorted(glob.glob('tests/*.txt'))
    return unittest.TestSuite([
        unittest.defaultTestLoader.loadTestsFromName('tests'),
        unittest.TestSuite([doctest.DocTestSuite(name)
                            for name in DOCTEST_MODULES]),
        doctest.DocFileSuite(setUp=setUp, tearDown=tearDown,
                             module_relative=False,
                             optionflags=(doctest.REPORT_NDIFF
                                          | doctest.NORMALIZE_WHITESPACE
                                          | doctest.ELLIPSIS),
                             *doctests),
    ])


def main():
    unittest.main(defaultTest='additional_tests')


if __name__ == '__main__':
    main()
