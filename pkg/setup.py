from setuptools import setup

setup(name='jumpex',
      version='0.1.0',
      description='Monte Carlo laboratory for exploratory mean-variance control with Levy jumps',
      packages=['jumpex'],
      py_modules=['main', 'experiment_pipeline', 'report_reviewer'],
      python_requires='>=3.10',
      install_requires=['numpy', 'scipy', 'pandas', 'python-dotenv', 'tomli; python_version < "3.11"'],
      extras_require={'test': ['pytest']},
      entry_points={
          'console_scripts': [
              'jumpex = main:cli'
          ]
      })
