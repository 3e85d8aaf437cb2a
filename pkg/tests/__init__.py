# Mark "tests" as a Python package.
