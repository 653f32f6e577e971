import { ApiClient } from "./api.js";
import { renderDimSelector, renderMeta, renderNotice, renderStaleFlag,
         renderTrajectory } from "./render.js";
import { ExplorerSession } from "./session.js";

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function connect(): Promise<void> {
  const baseUrl = (byId<HTMLInputElement>("base-url")).value;
  const api = new ApiClient(baseUrl);
  const meta = await api.meta();
  const session = new ExplorerSession(api);

  const metaBox = byId<HTMLElement>("meta");
  metaBox.replaceChildren(renderMeta(meta));

  const dimBox = byId<HTMLElement>("dim-box");
  const dimSelect = renderDimSelector(meta);
  dimBox.replaceChildren(dimSelect);
  dimSelect.onchange = () => {
    session.selectDim(Number(dimSelect.value));
  };

  const slider = byId<HTMLInputElement>("slider");
  const sliderReadout = byId<HTMLElement>("slider-value");
  slider.oninput = () => {
    sliderReadout.textContent = Number(slider.value).toFixed(4);
  };
  slider.onchange = () => {
    session.commit(Number(slider.value)); // debounced inside the session
  };

  byId<HTMLButtonElement>("probe").onclick = () => {
    const itemId = byId<HTMLInputElement>("anchor-item").value.trim();
    const userId = byId<HTMLInputElement>("anchor-user").value.trim();
    const k = Number(byId<HTMLInputElement>("anchor-k").value);
    session.settings.b = Number(byId<HTMLInputElement>("setting-b").value);
    session.settings.gamma = Number(byId<HTMLInputElement>("setting-gamma").value);
    session.settings.beam = Number(byId<HTMLInputElement>("setting-beam").value);
    session.selectAnchor(itemId ? { item: itemId } : { user: userId, k });
    session.selectDim(Number(dimSelect.value));
    session.sliderValue = null;
    void session.fire();
  };

  const output = byId<HTMLElement>("output");
  session.onChange(() => {
    const parts: HTMLElement[] = [];
    if (session.error && !session.stale) {
      parts.push(renderNotice(session.error));
    } else if (session.trajectory) {
      if (session.stale) parts.push(renderStaleFlag());
      parts.push(renderTrajectory(session.trajectory));
      const [a, b] = session.trajectory.range;
      slider.min = String(a);
      slider.max = String(b);
      slider.step = String((b - a) / 1000);
      slider.disabled = false;
    }
    output.replaceChildren(...parts);
  });
}

byId<HTMLButtonElement>("connect").onclick = () => {
  void connect().catch((err) => {
    byId<HTMLElement>("meta").textContent = `connection failed: ${err}`;
  });
};
