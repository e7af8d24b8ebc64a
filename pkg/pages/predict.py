import streamlit as st
import io
import time
from pathlib import Path
from utils.dataset_manager import NORMALIZATION, decode_image, density_preview, display_levels, load_normalization
from utils.errors import TafnetError
from utils.trainer import predict_pair


def get_normalization():
    """Constants next to the checkpoint, else those of the current dataset"""
    beside = Path(st.session_state.checkpoint_path).parent / NORMALIZATION
    if beside.is_file() or not st.session_state.dataset_manager:
        return load_normalization(beside)
    return st.session_state.dataset_manager.get_normalization()


class PredictPage:
    def render(self):
        st.markdown("# 🔮 Предсказание карты плотности")

        # Check if model is available
        if not st.session_state.model:
            st.error("Модель не загружена. Укажите чекпойнт в боковой панели.")
            return

        # File upload section
        st.markdown("## 📁 Пара изображений")
        col1, col2 = st.columns(2)
        with col1:
            rgb_file = st.file_uploader("RGB снимок (PPM)", type=["ppm"], help="8-битный бинарный PPM")
        with col2:
            thermal_file = st.file_uploader("Тепловизионный снимок (PGM)", type=["pgm"], help="8-битный бинарный PGM")

        drop = st.radio(
            "Входные данные:",
            ["Обе модальности", "Только RGB", "Только тепловизор"],
            horizontal=True,
            help="Отключённая модальность заменяется нулями после нормализации"
        )
        drop_modality = {"Только RGB": "thermal", "Только тепловизор": "rgb"}.get(drop)

        if rgb_file and thermal_file:
            if st.button("🚀 Посчитать людей", use_container_width=True):
                self._run_prediction(rgb_file, thermal_file, drop_modality)

    def _run_prediction(self, rgb_file, thermal_file, drop_modality):
        """Decode the pair, run the model and show the result"""
        start_time = time.time()
        try:
            rgb = decode_image(io.BytesIO(rgb_file.getvalue()), 3, rgb_file.name)
            thermal = decode_image(io.BytesIO(thermal_file.getvalue()), 1, thermal_file.name)
            stats = get_normalization()
            with st.spinner("Обработка..."):
                density = predict_pair(st.session_state.model, rgb, thermal, stats, drop_modality=drop_modality)
        except TafnetError as e:
            st.error(f"❌ Ошибка: {e}")
            return

        processing_time = time.time() - start_time
        st.success(f"✅ Готово за {processing_time:.1f}с")
        self._display_result(rgb, thermal, density)

    def _display_result(self, rgb, thermal, density):
        """Show inputs, density map and count"""
        st.metric("👥 Предсказанное количество", f"{density.sum():.2f}")

        col1, col2, col3 = st.columns(3)
        with col1:
            st.image(display_levels(rgb), caption="RGB", use_container_width=True)
        with col2:
            st.image(display_levels(thermal), caption="Тепловизор", use_container_width=True)
        with col3:
            st.image(density_preview(density), caption=f"Карта плотности {density.shape[0]}×{density.shape[1]}", use_container_width=True)

        with st.expander("🔢 Значения карты плотности"):
            st.dataframe(density, use_container_width=True)


def render_predict_page():
    """Render the predict page"""
    predict_page = PredictPage()
    predict_page.render()
