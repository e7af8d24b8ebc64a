import streamlit as st
from utils.dataset_manager import density_preview, display_levels
from utils.errors import TafnetError
from utils.trainer import predict_pair

SCENES_PER_PAGE = 10


class DatasetPage:
    def __init__(self):
        self.dataset_manager = st.session_state.dataset_manager

    def render(self):
        st.markdown("# 🗂️ Сцены датасета")

        if not self.dataset_manager:
            st.error("Датасет не выбран. Укажите папку в боковой панели.")
            return

        try:
            stats = self.dataset_manager.get_statistics()
        except TafnetError as e:
            st.error(f"Ошибка чтения датасета: {e}")
            return

        if not stats:
            st.info("📭 В папке нет ни одной части датасета (train/val/test).")
            return

        # Statistics
        self._render_statistics(stats)

        # Split tabs
        st.markdown("## 🖼️ Сцены")
        splits = list(stats)
        tabs = st.tabs([f"{split} ({stats[split]['images']})" for split in splits])
        for tab, split in zip(tabs, splits):
            with tab:
                self._render_split(split)

    def _render_statistics(self, stats):
        """Render per-split statistics"""
        st.markdown("### 📊 Статистика")
        rows = [
            {
                "Часть": split,
                "Снимков": s['images'],
                "☀️ Светлых": s['bright'],
                "🌙 Тёмных": s['dark'],
                "Людей всего": s['total_count'],
                "В среднем": round(s['mean_count'], 2),
            }
            for split, s in stats.items()
        ]
        st.dataframe(rows, use_container_width=True, hide_index=True)

    def _render_split(self, split):
        pairs = self.dataset_manager.get_split(split)

        illumination = st.selectbox(
            "Освещённость:",
            ["все", "bright", "dark"],
            key=f"illumination_{split}"
        )
        if illumination != "все":
            pairs = [p for p in pairs if p.illumination == illumination]

        if not pairs:
            st.info("📭 Нет сцен с такой освещённостью.")
            return

        pages = (len(pairs) + SCENES_PER_PAGE - 1) // SCENES_PER_PAGE
        page = st.number_input("Страница:", min_value=1, max_value=pages, value=1, key=f"page_{split}")
        start = (page - 1) * SCENES_PER_PAGE
        for pair in pairs[start:start + SCENES_PER_PAGE]:
            self._render_scene_card(pair)

    def _render_scene_card(self, pair):
        """Render a single scene"""
        icon = "☀️" if pair.illumination == "bright" else "🌙"
        with st.expander(f"{icon} {pair.id} · {pair.count} чел."):
            show_density = st.session_state.model is not None and st.checkbox(
                "Показать предсказание модели", key=f"predict_{pair.id}"
            )
            columns = st.columns(3 if show_density else 2)
            with columns[0]:
                st.image(display_levels(pair.rgb), caption="RGB", use_container_width=True)
            with columns[1]:
                st.image(display_levels(pair.thermal), caption="Тепловизор", use_container_width=True)

            if show_density:
                try:
                    density = predict_pair(
                        st.session_state.model, pair.rgb, pair.thermal, self.dataset_manager.get_normalization()
                    )
                except TafnetError as e:
                    st.error(f"❌ Ошибка предсказания: {e}")
                    return
                with columns[2]:
                    st.image(density_preview(density), caption="Карта плотности", use_container_width=True)
                st.caption(f"Разметка: {pair.count} · предсказание: {density.sum():.2f}")


def render_dataset_page():
    """Render the dataset page"""
    dataset_page = DatasetPage()
    dataset_page.render()
