# Core library of the TAFNet RGB-T crowd counter