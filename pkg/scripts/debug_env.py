import sys
print(f"Python executable: {sys.executable}")
try:
    import numpy
    print(f"Numpy version: {numpy.__version__}")
    import scipy
    print(f"Scipy version: {scipy.__version__}")
    import pandas
    print(f"Pandas version: {pandas.__version__}")
    import matplotlib
    print(f"Matplotlib version: {matplotlib.__version__}")
    import plotly
    print(f"Plotly version: {plotly.__version__}")
    import sacrebleu
    print(f"Sacrebleu version: {sacrebleu.__version__}")
    import yaml
    print(f"PyYAML version: {yaml.__version__}")
    import tqdm
    print(f"tqdm version: {tqdm.__version__}")
    import numpy as np
    print(f"BLAS: {np.show_config(mode='dicts').get('Build Dependencies', {}).get('blas', {}).get('name', 'unknown')}")
except Exception as e:
    print(f"Error importing: {e}")
