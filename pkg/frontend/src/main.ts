/** Browser entry point: wire the WebSocket transport, client, reducer, and
 * renderer to the controls in index.html. */

import { ConsoleClient } from "./client.js";
import { render, type Regions } from "./render.js";
import { WebSocketTransport } from "./transport.js";
import { initialState, reduce, type ConsoleState } from "./viewmodel.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function main(): void {
  const regions: Regions = {
    status: el("status"),
    scene: el("scene"),
    motion: el("motion"),
    log: el("log"),
  };
  let state: ConsoleState = initialState();
  let client: ConsoleClient | null = null;
  render(state, regions);

  const apply = (next: ConsoleState) => {
    state = next;
    render(state, regions);
  };

  el<HTMLButtonElement>("connect").onclick = async () => {
    const url = el<HTMLInputElement>("url").value;
    const transport = new WebSocketTransport(url);
    await transport.ready();
    client = new ConsoleClient(transport);
    client.onFrame((frame) => apply(reduce(state, frame)));
    apply({ ...initialState(), log: [`connecting to ${url}`] });
  };

  el<HTMLButtonElement>("start").onclick = () => {
    const task = el<HTMLInputElement>("task").value;
    const seed = Number(el<HTMLInputElement>("seed").value) || 0;
    client?.start(task, seed);
  };
  el<HTMLButtonElement>("intervene").onclick = () => client?.intervene();
  el<HTMLButtonElement>("send-correction").onclick = () => {
    const motion = el<HTMLInputElement>("correction").value.trim();
    if (motion) client?.correct(motion);
  };
  el<HTMLInputElement>("correction").onkeydown = (ev) => {
    if (ev.key === "Enter") el<HTMLButtonElement>("send-correction").click();
  };
  el<HTMLButtonElement>("keep").onclick = () => client?.keep();
  el<HTMLButtonElement>("resume").onclick = () => client?.resume();
  el<HTMLButtonElement>("save").onclick = () => client?.save();
}

main();
