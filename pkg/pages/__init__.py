# Streamlit pages of the TAFNet dashboard