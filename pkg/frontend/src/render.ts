import { ControlResponse, MetaResponse, ServiceError } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Ordered card list: one card per retrieved item, dim value as a badge. */
export function renderTrajectory(resp: ControlResponse): HTMLElement {
  const list = el("ol", "trajectory");
  resp.items.forEach((item, t) => {
    const card = el("li", "card");
    card.dataset.item = item;
    card.dataset.dimValue = String(resp.dim_values[t]);
    card.appendChild(el("span", "item-id", item));
    card.appendChild(el("span", "badge dim-value", resp.dim_values[t].toFixed(4)));
    card.appendChild(
      el("span", "badge subrange",
         `bin ${t + 1}: (${resp.boundaries[t].toFixed(3)}, ${resp.boundaries[t + 1].toFixed(3)}]`),
    );
    list.appendChild(card);
  });
  return list;
}

export function renderNotice(error: ServiceError): HTMLElement {
  const notice = el("div", "notice error");
  notice.dataset.code = String(error.code);
  notice.textContent = error.code === 422
    ? `not enough items in concept (${error.message})`
    : `request failed: ${error.message}`;
  return notice;
}

export function renderStaleFlag(): HTMLElement {
  return el("div", "notice stale", "showing previous trajectory (request failed)");
}

/** One <option> per representation dimension, from /meta. */
export function renderDimSelector(meta: MetaResponse): HTMLSelectElement {
  const select = el("select", "dim-selector");
  for (let j = 0; j < meta.d; j++) {
    const opt = document.createElement("option");
    opt.value = String(j);
    opt.textContent = `dim ${j}`;
    select.appendChild(opt);
  }
  return select;
}

export function renderMeta(meta: MetaResponse): HTMLElement {
  const box = el("div", "meta");
  box.appendChild(el("span", undefined,
    `${meta.M} items, ${meta.K} concepts, d=${meta.d}`));
  const counts = el("span", "concept-counts",
    " | concept sizes: " + meta.concept_item_counts.join(", "));
  box.appendChild(counts);
  return box;
}
